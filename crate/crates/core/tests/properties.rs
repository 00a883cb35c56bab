use std::sync::Arc;

use cmmloc::autodiff::{Graph, Mat, ParamStore};
use cmmloc::cmm_former::{cauchy_matrix, gaussian_matrix, order_objects, Consolidation, WindowConfig};
use cmmloc::coarse::{chance_hit_probability, recall_at_k, retrieve_topk, SubmapIndex};
use cmmloc::fine::{direction_indices, localization_recall, pairwise_distance_matrix, LocalizationRecord, SuccessPolicy};
use cmmloc::harness::{Checkpoint, ExperimentConfig};
use cmmloc::scene::{ColorName, Direction, SceneObject, SemanticLabel};
use ndarray::Array1;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Mat::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #[test]
    fn window_matrices_are_symmetric_toeplitz(p in 1usize..20, scale in 0.05f64..5.0) {
        for w in [cauchy_matrix(p, scale).unwrap(), gaussian_matrix(p, scale).unwrap()] {
            for i in 0..p {
                for j in 0..p {
                    prop_assert_eq!(w[[i, j]], w[[j, i]]);
                    prop_assert!(w[[i, j]] > 0.0 || (w[[i, j]] == 0.0 && i != j));
                    if i + 1 < p && j + 1 < p {
                        prop_assert_eq!(w[[i, j]], w[[i + 1, j + 1]]);
                    }
                    if j > i {
                        prop_assert!(w[[i, j]] <= w[[i, j - 1]]);
                    }
                }
            }
        }
    }

    #[test]
    fn object_order_is_a_label_grouped_permutation(labels in prop::collection::vec(0usize..8, 1..28), seed in any::<u64>()) {
        let objs: Vec<SceneObject> = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| SceneObject::new(i as u32, vec![[i as f64, 0.0, 0.0]], SemanticLabel::ALL[l], ColorName::Red, [0.5; 3]).unwrap())
            .collect();
        let refs: Vec<&SceneObject> = objs.iter().collect();
        let perm = order_objects(&refs, seed);
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..objs.len()).collect::<Vec<_>>());
        let seq: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let mut seen = Vec::new();
        for (i, &l) in seq.iter().enumerate() {
            if i == 0 || seq[i - 1] != l {
                prop_assert!(!seen.contains(&l), "label {} split in {:?}", l, seq);
                seen.push(l);
            }
        }
    }

    #[test]
    fn consolidation_weights_sum_to_one(p in 1usize..10, n in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = WindowConfig::with_dim(8);
        let mut ps = ParamStore::new();
        let cons = Consolidation::new(&mut ps, "c", &cfg, &mut rng);
        let mut g = Graph::new();
        let outs: Vec<_> = (0..n).map(|_| g.constant(cmmloc::gradcheck::random_mat(&mut rng, p, 8, 2.0))).collect();
        let w = cons.weights(&mut g, &ps, &outs).unwrap();
        for i in 0..p {
            let s: f64 = w.iter().map(|&v| g.value(v)[[i, 0]]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn distances_are_a_metric(pts in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..12)) {
        let c: Vec<[f64; 2]> = pts.iter().map(|&(x, y)| [x, y]).collect();
        let d = pairwise_distance_matrix(&c);
        let n = c.len();
        for i in 0..n {
            prop_assert_eq!(d[[i, i]], 0.0);
            for j in 0..n {
                prop_assert_eq!(d[[i, j]], d[[j, i]]);
                for k in 0..n {
                    prop_assert!(d[[i, k]] <= d[[i, j]] + d[[j, k]] + 1e-9);
                }
            }
        }
    }

    #[test]
    fn directions_are_antisymmetric(pts in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 2..10)) {
        let c: Vec<[f64; 2]> = pts.iter().map(|&(x, y)| [x, y]).collect();
        let idx = direction_indices(&c);
        let n = c.len();
        for i in 0..n {
            for j in 0..n {
                if i != j && c[i] != c[j] {
                    let a = Direction::ALL[idx[i * n + j]];
                    let b = Direction::ALL[idx[j * n + i]];
                    prop_assert_eq!(a.opposite(), b);
                }
            }
        }
    }

    #[test]
    fn top_k_is_a_sorted_prefix(desc in mat(12, 3), q in prop::collection::vec(-3.0f64..3.0, 3), k in 1usize..12) {
        let index = SubmapIndex { descriptors: desc.clone(), ids: (0..12).collect(), normalized: false };
        let q = Array1::from(q);
        let short = retrieve_topk(&q, &index, k).unwrap();
        let long = retrieve_topk(&q, &index, 12).unwrap();
        prop_assert_eq!(&short[..], &long[..k]);
        let scores = desc.dot(&q);
        for w in long.windows(2) {
            prop_assert!(scores[w[0] as usize] >= scores[w[1] as usize]);
        }
        prop_assert!(retrieve_topk(&q, &index, 13).is_err());
    }

    #[test]
    fn recall_is_monotone_in_k(rankings in prop::collection::vec(Just((0u32..10).collect::<Vec<_>>()).prop_shuffle(), 1..20), pos in prop::collection::vec(0u32..10, 20)) {
        let positives: Vec<Vec<u32>> = pos[..rankings.len()].iter().map(|&p| vec![p]).collect();
        let mut last = 0.0;
        for k in 1..=10 {
            let r = recall_at_k(&rankings, &positives, k).unwrap();
            prop_assert!(r >= last);
            last = r;
        }
        prop_assert_eq!(last, 1.0);
    }

    #[test]
    fn chance_is_a_monotone_probability(size in 1usize..200, m in 0usize..10, k in 1usize..20) {
        let m = m.min(size);
        let k = k.min(size);
        let p = chance_hit_probability(size, m, k);
        prop_assert!((0.0..=1.0).contains(&p));
        if k < size {
            prop_assert!(chance_hit_probability(size, m, k + 1) >= p - 1e-12);
        }
    }

    #[test]
    fn localization_grid_is_monotone(errors in prop::collection::vec(prop::collection::vec(0.0f64..30.0, 10), 1..15)) {
        let records: Vec<LocalizationRecord> = errors
            .iter()
            .enumerate()
            .flat_map(|(q, errs)| errs.iter().enumerate().map(move |(rank, &error)| LocalizationRecord {
                query_id: q as u32, submap_id: rank as u32, rank, pred_x: 0.0, pred_y: 0.0, error,
            }))
            .collect();
        for policy in [SuccessPolicy::Any, SuccessPolicy::Best] {
            let g = localization_recall(&records, &[1, 5, 10], &[5.0, 10.0, 15.0], policy).unwrap();
            for a in 0..3 {
                for b in 0..3 {
                    if a > 0 { prop_assert!(g[[a, b]] >= g[[a - 1, b]]); }
                    if b > 0 { prop_assert!(g[[a, b]] >= g[[a, b - 1]]); }
                }
            }
        }
    }

    #[test]
    fn checkpoints_round_trip(shapes in prop::collection::vec((1usize..5, 1usize..5), 1..6), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        for (i, &(r, c)) in shapes.iter().enumerate() {
            ps.add(format!("t{i}"), cmmloc::gradcheck::random_mat(&mut rng, r, c, 10.0));
        }
        ps.round_to_f32();
        let ck = Checkpoint::from_bytes(&Checkpoint::from_params("s", "h", &ps).to_bytes()).unwrap();
        let mut back = ps.clone();
        for id in back.ids() {
            back.get_mut(id).fill(0.0);
        }
        ck.restore(&mut back).unwrap();
        for id in ps.ids() {
            prop_assert_eq!(ps.get(id), back.get(id));
        }
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), lr in 1e-6f64..1e-1, gammas in prop::collection::vec(0.01f64..10.0, 1..5), noise in 0.0f64..1.0) {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        cfg.fine.learning_rate = lr;
        cfg.coarse.window.gammas = gammas;
        cfg.eval.label_noise = noise;
        let back = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
    }
}

#[test]
fn masked_windows_ignore_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = WindowConfig::with_dim(8);
    let mut ps = ParamStore::new();
    let win = cmmloc::cmm_former::Window::new(&mut ps, "w", &cfg, &mut rng);
    let x = cmmloc::gradcheck::random_mat(&mut rng, 4, 8, 1.0);
    let mut padded = x.clone();
    padded.row_mut(3).fill(100.0);
    let w = Arc::new(cauchy_matrix(4, 1.0).unwrap());
    let mask = Arc::new(vec![false, false, false, true]);
    let mut g = Graph::new();
    let a = g.constant(x);
    let b = g.constant(padded);
    let ya = win.forward(&mut g, &ps, a, &w, Some(&mask)).unwrap();
    let yb = win.forward(&mut g, &ps, b, &w, Some(&mask)).unwrap();
    let diff = (&g.value(ya).slice(ndarray::s![..3, ..]) - &g.value(yb).slice(ndarray::s![..3, ..])).mapv(f64::abs).sum();
    assert!(diff < 1e-12);
}
