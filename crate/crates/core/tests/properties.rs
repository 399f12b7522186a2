mod common;

use common::{ade_oracle, fde_oracle, small_config};
use dagnet::gat::{GatLayer, GraphRefiner, GraphTopology, HeadMerge};
use dagnet::graph::Graph;
use dagnet::grid::{to_absolute, to_relative, Extent, Point, SceneGrid};
use dagnet::metrics::{ade, fde};
use dagnet::model::{Model, ModelVariant, RolloutOptions};
use dagnet::nn::{Activation, ParamStore, Session};
use dagnet::scene::{DatasetKind, Scene};
use dagnet::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn coord() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6..1e6f64,
        -1.0..1.0f64,
        (-1.0..1.0f64, -12i32..6).prop_map(|(m, e)| m * 10f64.powi(e)),
        Just(0.0),
    ]
}

fn trajectory() -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec((coord(), coord()).prop_map(|(x, y)| [x, y]), 2..30)
}

fn positions(n: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64).prop_map(|(x, y)| [x, y]), n)
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relative_absolute_roundtrip_is_exact(t in trajectory()) {
        let seq = to_relative(&t).unwrap();
        prop_assert_eq!(seq.displacements.len(), t.len() - 1);
        prop_assert_eq!(to_absolute(&seq), t);
    }

    #[test]
    fn metrics_match_scalar_oracle(seed in any::<u64>()) {
        let (p, t, m) = common::random_instance(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!((ade(&p, &t, &m).unwrap() - ade_oracle(&p, &t, &m)).abs() <= 1e-12);
        prop_assert!((fde(&p, &t, &m).unwrap() - fde_oracle(&p, &t, &m)).abs() <= 1e-12);
    }

    #[test]
    fn cells_are_total_and_in_range(
        x in -1e3..1e3f64, y in -1e3..1e3f64, rows in 1usize..12, cols in 1usize..12,
    ) {
        let grid = SceneGrid::new(Extent::new(-10.0, -5.0, 10.0, 5.0).unwrap(), rows, cols).unwrap();
        prop_assert!(grid.position_to_cell([x, y]) < rows * cols);
    }

    #[test]
    fn goals_are_one_hot_and_piecewise_constant(t in prop::collection::vec((0.0..8.0f64, 0.0..6.0f64).prop_map(|(x, y)| [x, y]), 2..25), w in 1usize..6) {
        let grid = SceneGrid::new(Extent::new(0.0, 0.0, 8.0, 6.0).unwrap(), 3, 4).unwrap();
        let goals = grid.extract_goals(&t, w).unwrap();
        let cells = grid.goal_cells(&t, w).unwrap();
        for (s, row) in (0..t.len()).map(|s| (s, goals.row(s))) {
            prop_assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            prop_assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 11);
            if s > 0 && s % w != 0 {
                prop_assert_eq!(cells[s], cells[s - 1]);
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-50.0..50.0f64, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 4], v).unwrap());
        let s = g.softmax(x, 1).unwrap();
        for r in 0..3 {
            let row = g.value(s).row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_skip_non_neighbours(
        pos in positions(6), present in prop::collection::vec(any::<bool>(), 6), seed in any::<u64>(),
    ) {
        let topo = GraphTopology::build(&pos, 3.0, &present).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = GatLayer::new(&mut store, "g", 3, 4, HeadMerge::Concat, Activation::Elu, &mut rng).unwrap();
        let mut s = Session::new(&store, false);
        let x = s.constant(Tensor::uniform(&[6, 3], -2.0, 2.0, &mut rng));
        let (_, alphas) = layer.forward_with_attention(&mut s, x, &topo).unwrap();
        for a in alphas {
            let a = s.value(a);
            for i in 0..6 {
                prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                for j in 0..6 {
                    if !topo.has_edge(i, j) {
                        prop_assert_eq!(a.get2(i, j), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn refine_is_permutation_equivariant(pos in positions(5), perm in permutation(5), seed in any::<u64>()) {
        let present = [true, true, false, true, true];
        let topo = GraphTopology::build(&pos, 3.0, &present).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let refiner = GraphRefiner::new(&mut store, "r", 4, 3, &mut rng).unwrap();
        let x = Tensor::uniform(&[5, 4], -1.0, 1.0, &mut rng);
        let px = Tensor::from_rows(&perm.iter().map(|&j| x.row(j).to_vec()).collect::<Vec<_>>()).unwrap();
        let run = |x: Tensor, topo: &GraphTopology| {
            let mut s = Session::new(&store, false);
            let v = s.constant(x);
            let out = refiner.refine(&mut s, v, topo).unwrap();
            s.value(out).clone()
        };
        let base = run(x, &topo);
        let permuted = run(px, &topo.permuted(&perm));
        for (i, &j) in perm.iter().enumerate() {
            prop_assert_eq!(permuted.row(i), base.row(j));
        }
    }

    #[test]
    fn kl_is_non_negative(v in prop::collection::vec(-3.0..3.0f64, 16)) {
        let mut g = Graph::new();
        let t = |s: &[f64]| Tensor::new(&[1, 4], s.to_vec()).unwrap();
        let q = dagnet::gaussian::GaussianParams { mean: g.constant(t(&v[0..4])), log_var: g.constant(t(&v[4..8])) };
        let p = dagnet::gaussian::GaussianParams { mean: g.constant(t(&v[8..12])), log_var: g.constant(t(&v[12..16])) };
        let kl = dagnet::gaussian::kl_divergence(&mut g, &q, &p).unwrap();
        prop_assert!(g.value(kl).item().unwrap() >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn rollout_is_permutation_equivariant(perm in permutation(4), seed in 0u64..1000) {
        let scene = common::synthetic(1, 4, 9, seed).remove(0);
        for variant in ModelVariant::ALL {
            let (model, store) = Model::init(small_config(variant, 3, 4), seed).unwrap();
            let opts = RolloutOptions::deterministic(4, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let base = model.rollout(&store, &scene, &opts, &mut rng).unwrap();
            let permuted = model.rollout(&store, &scene.permuted(&perm), &opts, &mut rng).unwrap();
            for (i, &j) in perm.iter().enumerate() {
                prop_assert_eq!(&permuted.predicted[i], &base.predicted[j]);
            }
        }
    }

    #[test]
    fn loss_is_finite_with_absent_agents(seed in 0u64..1000, gap in 1usize..7) {
        let mut scene = common::synthetic(1, 3, 8, seed).remove(0);
        for t in gap..8 {
            scene.positions[2][t] = [0.0, 0.0];
            scene.mask[2][t] = false;
        }
        let scene = Scene::new(scene.positions, scene.mask, DatasetKind::Synthetic, 5.0, scene.extent).unwrap();
        for variant in ModelVariant::ALL {
            let (model, store) = Model::init(small_config(variant, 3, 4), seed).unwrap();
            let prepared = model.prepare(&scene).unwrap();
            let mut s = Session::new(&store, true);
            let b = model.loss(&mut s, &prepared, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert!(s.value(b.total).item().unwrap().is_finite());
            let grads = s.backward(b.total).unwrap();
            prop_assert!(grads.global_norm().is_finite());
        }
    }
}
