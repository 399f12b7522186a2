#![allow(dead_code)]

use std::path::Path;

use dagnet::config::RunConfig;
use dagnet::data::{
    generate_synthetic, generate_synthetic_plays, scenes_to_records, split_dataset, write_plays, write_trajnet,
    SyntheticConfig,
};
use dagnet::eval::{evaluate, EvalConfig, EvalReport, ModelPredictor};
use dagnet::graph::Var;
use dagnet::grid::Point;
use dagnet::model::{Model, ModelConfig, ModelVariant, Rollout, RolloutOptions};
use dagnet::gat::{GatLayer, GraphRefiner, GraphTopology, HeadMerge};
use dagnet::nn::{Activation, GruCell, Linear, Mlp, ParamStore, Session};
use dagnet::tensor::Tensor;
use dagnet::scene::{DatasetKind, Scene};
use dagnet::train::{load_model, prepare_all, save_model, train_run, validation_loss, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, as a fraction of `max(1, |loss|)`.
/// Central differences at `FD_STEP` carry round-off of about
/// `1e-16·|loss| / FD_STEP`, so smaller components cannot be resolved.
pub const FD_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: (usize, usize),
}

/// Compares autodiff gradients of every parameter against central finite
/// differences of `f`, which must be a deterministic function of the store.
pub fn grad_check(store: &ParamStore, f: &dyn Fn(&mut Session) -> Var) -> GradReport {
    let mut s = Session::new(store, true);
    let loss = f(&mut s);
    let grads = s.backward(loss).unwrap();
    let floor = FD_FLOOR * s.value(loss).item().unwrap().abs().max(1.0);
    let eval = |p: &ParamStore| {
        let mut s = Session::new(p, false);
        let l = f(&mut s);
        s.value(l).item().unwrap()
    };
    let mut report = GradReport {
        checked: 0,
        max_rel: 0.0,
        worst: (0, 0),
    };
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    let mut work = store.clone();
    for (pi, &id) in ids.iter().enumerate() {
        let analytic = grads.get(id).cloned().unwrap_or_else(|| dagnet::tensor::Tensor::zeros(store.get(id).shape()));
        for k in 0..store.get(id).numel() {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + FD_STEP;
            let up = eval(&work);
            work.get_mut(id).data_mut()[k] = orig - FD_STEP;
            let down = eval(&work);
            work.get_mut(id).data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = (pi, k);
            }
            report.checked += 1;
        }
    }
    report
}

/// Adds `U(-scale, scale)` to every parameter, moving away from the zero
/// biases of a fresh initialisation where ReLU inputs sit exactly on the
/// kink.
pub fn jitter<R: Rng>(store: &mut ParamStore, scale: f64, rng: &mut R) {
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

pub fn ade_oracle(pred: &[Vec<Point>], truth: &[Vec<Point>], mask: &[Vec<bool>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0.0;
    for a in 0..pred.len() {
        for t in 0..pred[a].len() {
            if mask[a][t] {
                let dx = pred[a][t][0] - truth[a][t][0];
                let dy = pred[a][t][1] - truth[a][t][1];
                total += (dx * dx + dy * dy).sqrt();
                count += 1.0;
            }
        }
    }
    total / count
}

pub fn fde_oracle(pred: &[Vec<Point>], truth: &[Vec<Point>], mask: &[Vec<bool>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0.0;
    for a in 0..pred.len() {
        let t = pred[a].len() - 1;
        if mask[a][t] {
            let dx = pred[a][t][0] - truth[a][t][0];
            let dy = pred[a][t][1] - truth[a][t][1];
            total += (dx * dx + dy * dy).sqrt();
            count += 1.0;
        }
    }
    total / count
}

/// Predictions, ground truth and validity mask of one metric instance.
pub type Instance = (Vec<Vec<Point>>, Vec<Vec<Point>>, Vec<Vec<bool>>);

/// Random instance with at least one valid final entry.
pub fn random_instance<R: Rng>(rng: &mut R) -> Instance {
    let n = rng.gen_range(1..6);
    let t = rng.gen_range(1..15);
    let mut pt = || [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)];
    let pred: Vec<Vec<Point>> = (0..n).map(|_| (0..t).map(|_| pt()).collect()).collect();
    let truth: Vec<Vec<Point>> = (0..n).map(|_| (0..t).map(|_| pt()).collect()).collect();
    let mut mask: Vec<Vec<bool>> = (0..n).map(|_| (0..t).map(|_| rng.gen_bool(0.8)).collect()).collect();
    mask[0][t - 1] = true;
    (pred, truth, mask)
}

/// `log N(x | μ, e^lv)` summed over dimensions, written out independently
/// of the library.
pub fn log_density(x: &[f64], mu: &[f64], lv: &[f64]) -> f64 {
    x.iter()
        .zip(mu)
        .zip(lv)
        .map(|((&x, &m), &l)| -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * l - (x - m).powi(2) / (2.0 * l.exp()))
        .sum()
}

/// Monte Carlo `E_q[log q − log p]` with its standard error.
pub fn mc_kl<R: Rng>(mq: &[f64], lq: &[f64], mp: &[f64], lp: &[f64], samples: usize, rng: &mut R) -> (f64, f64) {
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut z = vec![0.0; mq.len()];
    for _ in 0..samples {
        for i in 0..z.len() {
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            z[i] = mq[i] + (0.5 * lq[i]).exp() * e;
        }
        let v = log_density(&z, mq, lq) - log_density(&z, mp, lp);
        sum += v;
        sq += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sq / n - mean * mean) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn small_config(variant: ModelVariant, rows: usize, cols: usize) -> ModelConfig {
    let mut c = ModelConfig::new(variant, rows, cols);
    c.feature_dim = 5;
    c.hidden_dim = 4;
    c.latent_dim = 3;
    c.head_dim = 5;
    c.graph_hidden = 2;
    c.goal_window = 2;
    c.adjacency_threshold = 2.0;
    c.displacement_scale = 0.5;
    c
}

pub fn synthetic(n_scenes: usize, n_agents: usize, steps: usize, seed: u64) -> Vec<Scene> {
    generate_synthetic(&SyntheticConfig {
        seed,
        n_scenes,
        n_agents,
        steps,
        grid_rows: 3,
        grid_cols: 4,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

type ConfigEdit = (&'static str, fn(&mut ModelConfig));

fn rollout_with(cfg: ModelConfig, scene: &Scene, seed: u64) -> Rollout {
    let (model, store) = Model::init(cfg, seed).unwrap();
    model
        .rollout(&store, scene, &RolloutOptions::deterministic(5, 4), &mut ChaCha8Rng::seed_from_u64(seed))
        .unwrap()
}

fn loss_with(cfg: ModelConfig, scene: &Scene, seed: u64) -> f64 {
    let (model, store) = Model::init(cfg, seed).unwrap();
    let prepared = model.prepare(scene).unwrap();
    validation_loss(&model, &store, &[prepared]).unwrap()
}

/// Perturbations of goal and topology inputs, each paired with whether the
/// variant's forecast must stay bitwise identical.
pub fn ablation_contracts(seed: u64) -> Vec<(String, bool)> {
    let scene = synthetic(1, 4, 9, seed).remove(0);
    let mut shifted = scene.clone();
    for t in 0..scene.len() {
        for a in 1..scene.num_agents() {
            shifted.positions[a][t][0] += 0.37;
            shifted.positions[a][t][1] -= 0.21;
        }
    }
    let mut checks = Vec::new();
    for variant in ModelVariant::ALL {
        let base_cfg = small_config(variant, 3, 4);
        let base = rollout_with(base_cfg.clone(), &scene, seed);
        let base_loss = loss_with(base_cfg.clone(), &scene, seed);
        let goal_edits: [ConfigEdit; 2] = [
            ("grid 5x7", |c| {
                c.grid_rows = 5;
                c.grid_cols = 7;
            }),
            ("goal window 3", |c| c.goal_window = 3),
        ];
        for (what, edit) in goal_edits {
            let mut cfg = base_cfg.clone();
            edit(&mut cfg);
            let same = rollout_with(cfg.clone(), &scene, seed) == base && loss_with(cfg, &scene, seed) == base_loss;
            let expected = !variant.uses_goals();
            checks.push((format!("{variant} {what}: unchanged={same}, expected {expected}"), same == expected));
        }
        for threshold in [0.5, 100.0] {
            let mut cfg = base_cfg.clone();
            cfg.adjacency_threshold = threshold;
            let same = rollout_with(cfg, &scene, seed) == base;
            if variant == ModelVariant::Vanilla {
                checks.push((format!("{variant} threshold {threshold}: unchanged={same}"), same));
            } else if threshold == 0.5 {
                checks.push((format!("{variant} threshold {threshold}: unchanged={same}, expected false"), !same));
            }
        }
        if variant == ModelVariant::Vanilla {
            let moved = rollout_with(base_cfg.clone(), &shifted, seed);
            let same = moved.predicted[0] == base.predicted[0];
            checks.push((format!("{variant} other agents moved: agent 0 unchanged={same}"), same));
        }
    }
    let vanilla = rollout_with(small_config(ModelVariant::Vanilla, 3, 4), &scene, seed);
    let (model, mut store) = Model::init(small_config(ModelVariant::Avrnn, 3, 4), seed).unwrap();
    model.hidden_refiner.as_ref().unwrap().set_pass_through(&mut store);
    let pass = model
        .rollout(&store, &scene, &RolloutOptions::deterministic(5, 4), &mut ChaCha8Rng::seed_from_u64(seed))
        .unwrap();
    let same = pass == vanilla;
    checks.push((format!("avrnn with identity refiner equals vanilla={same}"), same));
    checks
}

pub fn tiny_run(dataset: DatasetKind) -> RunConfig {
    let mut cfg = RunConfig::preset(dataset);
    cfg.feature_dim = 6;
    cfg.hidden_dim = 6;
    cfg.latent_dim = 3;
    cfg.head_dim = 6;
    cfg.graph_hidden = 2;
    cfg.epochs = 1;
    cfg.batch_size = 4;
    cfg
}

fn check_report(report: &EvalReport, dataset: DatasetKind, splits: &[(usize, usize)]) -> Vec<(String, bool)> {
    let mut checks = vec![(
        format!("{dataset} report unit `{}`", report.unit),
        report.dataset == dataset && report.unit == dataset.unit(),
    )];
    for &(obs, pred) in splits {
        let ok = report.split(obs, pred).is_some_and(|s| {
            s.n_scenes > 0 && s.n_agents > 0 && s.ade.is_finite() && s.fde.is_finite() && s.ade >= 0.0
        });
        checks.push((format!("{dataset} split {obs}-{pred} reported"), ok));
    }
    checks
}

/// Trains a tiny model on urban-format and sports-format files written to
/// `dir`, evaluates the standard splits and checks the report structure.
pub fn protocol_checks(dir: &Path) -> Vec<(String, bool)> {
    let mut checks = Vec::new();

    let scenes = generate_synthetic(&SyntheticConfig {
        n_scenes: 8,
        n_agents: 4,
        steps: 40,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let trajnet = dir.join("urban.txt");
    std::fs::write(&trajnet, write_trajnet(&scenes_to_records(&scenes, 10))).unwrap();
    let mut cfg = tiny_run(DatasetKind::Sdd);
    cfg.data_path = Some(trajnet);
    cfg.grid_rows = 3;
    cfg.grid_cols = 3;
    let urban = [(8, 12)];
    checks.extend(run_protocol(&cfg, &urban, &dir.join("urban")));

    let plays = generate_synthetic_plays(4, 10, 0.3);
    let path = dir.join("plays.txt");
    std::fs::write(&path, write_plays(&plays)).unwrap();
    let mut cfg = tiny_run(DatasetKind::Sports);
    cfg.data_path = Some(path);
    let sports = [(10, 40), (20, 10), (20, 20), (20, 30)];
    checks.extend(run_protocol(&cfg, &sports, &dir.join("sports")));
    checks
}

fn run_protocol(cfg: &RunConfig, splits: &[(usize, usize)], out: &Path) -> Vec<(String, bool)> {
    let window = splits.iter().map(|&(o, p)| o + p).max().unwrap();
    let parts = split_dataset(&cfg.load_scenes_with_window(window).unwrap(), cfg.data_seed);
    let art = train_run(cfg, &parts.train, &parts.val, out).unwrap();
    let (model, store) = load_model(&art.checkpoint).unwrap();
    let predictor = ModelPredictor {
        model: &model,
        store: &store,
        sample: false,
        ground_truth_goals: false,
    };
    let ecfg = EvalConfig {
        splits: splits.to_vec(),
        seed: cfg.seed,
    };
    let report = evaluate(&predictor, model.config.variant.display_name(), &parts.test, cfg.dataset, &ecfg).unwrap();
    let mut checks = check_report(&report, cfg.dataset, splits);
    checks.push((
        format!("{} json lines keyed by split", cfg.dataset),
        report.to_json_lines().lines().count() == splits.len(),
    ));
    checks
}

/// Repeats ten training steps and an evaluation from the same seed and
/// compares the results bitwise.
pub fn determinism_checks(dir: &Path) -> Vec<(String, bool)> {
    let scenes = synthetic(4, 3, 10, 11);
    let curve = || {
        let (model, store) = Model::init(small_config(ModelVariant::Dagnet, 3, 4), 12).unwrap();
        let prepared = prepare_all(&model, &scenes).unwrap();
        let mut trainer = Trainer::new(&model, store, 1e-2, 10.0, 13);
        let mut losses = Vec::new();
        for k in 0..10 {
            let batch = [&prepared[k % 4], &prepared[(k + 1) % 4]];
            losses.push(trainer.step(&batch).unwrap().loss.to_bits());
        }
        (losses, trainer.store)
    };
    let (first, store) = curve();
    let (second, _) = curve();
    let mut checks = vec![(format!("10-step loss curves identical={}", first == second), first == second)];

    let model = Model::init(small_config(ModelVariant::Dagnet, 3, 4), 12).unwrap().0;
    let ecfg = EvalConfig {
        splits: vec![(4, 6), (6, 4)],
        seed: 14,
    };
    let report = |store: &ParamStore, sample: bool| {
        let p = ModelPredictor {
            model: &model,
            store,
            sample,
            ground_truth_goals: false,
        };
        evaluate(&p, "DAG-Net", &scenes, DatasetKind::Synthetic, &ecfg).unwrap()
    };
    for sample in [false, true] {
        let same = report(&store, sample) == report(&store, sample);
        checks.push((format!("eval reports identical (sampling={sample})={same}"), same));
    }

    let ckpt = dir.join("det.ckpt");
    save_model(&ckpt, &model, &store, None).unwrap();
    let (loaded_model, loaded) = load_model(&ckpt).unwrap();
    let reloaded = {
        let p = ModelPredictor {
            model: &loaded_model,
            store: &loaded,
            sample: true,
            ground_truth_goals: false,
        };
        evaluate(&p, "DAG-Net", &scenes, DatasetKind::Synthetic, &ecfg).unwrap()
    };
    let same = reloaded == report(&store, true);
    checks.push((format!("checkpoint reload reproduces eval={same}"), same));
    checks
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output entry matters.
fn weighted_sum(s: &mut Session, out: Var, seed: u64) -> Var {
    let shape = s.graph.shape(out).to_vec();
    let w = s.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
    let p = s.graph.mul(out, w).unwrap();
    s.graph.sum(p).unwrap()
}

fn input(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[rows, cols], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Finite-difference reports for every layer type and for the full loss of
/// each variant on a 2-agent, 4-step scene. The flag is whether every
/// parameter entry was checked.
pub fn gradient_suite() -> Vec<(String, GradReport, bool)> {
    let rng = ChaCha8Rng::seed_from_u64;
    let mut out = Vec::new();
    let mut push = |name: String, store: &ParamStore, r: GradReport| {
        let all = r.checked == store.num_values();
        out.push((name, r, all));
    };

    let x = input(3, 4, 2);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 4, 3, &mut rng(1)).unwrap();
    let r = grad_check(&store, &|s| {
        let xv = s.constant(x.clone());
        let out = lin.forward(s, xv).unwrap();
        weighted_sum(s, out, 3)
    });
    push("linear".into(), &store, r);

    for act in [Activation::Tanh, Activation::Sigmoid, Activation::Elu, Activation::LeakyRelu(0.1)] {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "mlp", &[4, 5, 2], act, true, &mut rng(4)).unwrap();
        let r = grad_check(&store, &|s| {
            let xv = s.constant(x.clone());
            let out = mlp.forward(s, xv).unwrap();
            weighted_sum(s, out, 5)
        });
        push(format!("mlp {act}"), &store, r);
    }

    let mut store = ParamStore::new();
    let gru = GruCell::new(&mut store, "gru", 3, 4, &mut rng(6)).unwrap();
    let xs: Vec<Tensor> = (0..3).map(|t| input(2, 3, 10 + t)).collect();
    let r = grad_check(&store, &|s| {
        let mut h = s.constant(Tensor::zeros(&[2, 4]));
        for x in &xs {
            let xv = s.constant(x.clone());
            h = gru.forward(s, xv, h).unwrap();
        }
        weighted_sum(s, h, 7)
    });
    push("gru over 3 steps".into(), &store, r);

    let positions = [[0.0, 0.0], [1.0, 0.5], [5.0, 5.0], [0.5, 1.5]];
    let topo = GraphTopology::build(&positions, 2.0, &[true, true, true, false]).unwrap();
    let x = input(4, 3, 8);
    for merge in [HeadMerge::Concat, HeadMerge::Mean] {
        let mut store = ParamStore::new();
        let layer = GatLayer::new(&mut store, "gat", 3, 2, merge, Activation::Elu, &mut rng(9)).unwrap();
        let r = grad_check(&store, &|s| {
            let xv = s.constant(x.clone());
            let out = layer.forward(s, xv, &topo).unwrap();
            weighted_sum(s, out, 11)
        });
        push(format!("gat {merge:?}"), &store, r);
    }
    let mut store = ParamStore::new();
    let refiner = GraphRefiner::new(&mut store, "ref", 3, 2, &mut rng(12)).unwrap();
    let r = grad_check(&store, &|s| {
        let xv = s.constant(x.clone());
        let out = refiner.refine(s, xv, &topo).unwrap();
        weighted_sum(s, out, 13)
    });
    push("graph refiner".into(), &store, r);

    let scene = synthetic(1, 2, 4, 21).remove(0);
    for variant in ModelVariant::ALL {
        let (model, mut store) = Model::init(small_config(variant, 3, 4), 22).unwrap();
        jitter(&mut store, 0.1, &mut rng(24));
        let prepared = model.prepare(&scene).unwrap();
        let r = grad_check(&store, &|s| model.loss(s, &prepared, &mut rng(23)).unwrap().total);
        push(format!("{variant} loss"), &store, r);
    }
    out
}
