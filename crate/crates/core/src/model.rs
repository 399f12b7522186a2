//! The goal-conditioned variational recurrent network, its ablations, the
//! training loss and autoregressive roll-out.
//!
//! Every quantity is batched over the agents of one scene: row `i` of each
//! matrix belongs to agent `i`. Displacements enter the networks divided by
//! [`ModelConfig::displacement_scale`] and leave multiplied by it.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gat::{GraphRefiner, GraphTopology};
use crate::gaussian::{self, GaussianParams};
use crate::graph::{sorted_sum, Var};
use crate::grid::{Extent, Point, SceneGrid};
use crate::nn::{Activation, GruCell, Mlp, ParamStore, Session};
use crate::scene::Scene;
use crate::tensor::Tensor;

/// Width of the pooled scene disposition: mean and max of the other agents'
/// normalised positions.
pub const DISPOSITION_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    /// No interaction, no goals.
    Vanilla,
    /// Attentive refinement of hidden states only.
    Avrnn,
    /// Goals and both refinement stages.
    Dagnet,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 3] = [ModelVariant::Vanilla, ModelVariant::Avrnn, ModelVariant::Dagnet];

    pub fn uses_goals(self) -> bool {
        self == ModelVariant::Dagnet
    }

    pub fn refines_hidden(self) -> bool {
        self != ModelVariant::Vanilla
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ModelVariant::Vanilla => "Vanilla VRNN",
            ModelVariant::Avrnn => "A-VRNN",
            ModelVariant::Dagnet => "DAG-Net",
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelVariant::Vanilla => "vanilla",
            ModelVariant::Avrnn => "avrnn",
            ModelVariant::Dagnet => "dagnet",
        })
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(ModelVariant::Vanilla),
            "avrnn" => Ok(ModelVariant::Avrnn),
            "dagnet" => Ok(ModelVariant::Dagnet),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Neighbourhood used when refining goals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoalGraph {
    Complete,
    Distance,
}

impl FromStr for GoalGraph {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "complete" => Ok(GoalGraph::Complete),
            "distance" => Ok(GoalGraph::Distance),
            other => Err(Error::Config(format!("unknown goal graph `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub goal_window: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    /// Width of the hidden layer inside the encoder, decoder, prior and goal
    /// networks.
    pub head_dim: usize,
    pub graph_hidden: usize,
    pub activation: Activation,
    pub displacement_scale: f64,
    pub adjacency_threshold: f64,
    pub goal_graph: GoalGraph,
    pub ce_weight: f64,
    /// Condition prior, encoder and decoder on ground-truth goals in training.
    pub teacher_forcing: bool,
}

impl ModelConfig {
    pub fn new(variant: ModelVariant, grid_rows: usize, grid_cols: usize) -> Self {
        Self {
            variant,
            grid_rows,
            grid_cols,
            goal_window: 4,
            feature_dim: 64,
            hidden_dim: 64,
            latent_dim: 32,
            head_dim: 64,
            graph_hidden: 4,
            activation: Activation::Relu,
            displacement_scale: 1.0,
            adjacency_threshold: 3.0,
            goal_graph: GoalGraph::Complete,
            ce_weight: 1e-2,
            teacher_forcing: true,
        }
    }

    pub fn num_cells(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("grid_rows", self.grid_rows),
            ("grid_cols", self.grid_cols),
            ("goal_window", self.goal_window),
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("latent_dim", self.latent_dim),
            ("head_dim", self.head_dim),
            ("graph_hidden", self.graph_hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.displacement_scale > 0.0 && self.displacement_scale.is_finite()) {
            return Err(Error::Config("displacement_scale must be positive".into()));
        }
        if self.adjacency_threshold.is_nan() || self.adjacency_threshold < 0.0 {
            return Err(Error::Config("adjacency_threshold must be non-negative".into()));
        }
        if self.ce_weight.is_nan() || self.ce_weight < 0.0 {
            return Err(Error::Config("ce_weight must be non-negative".into()));
        }
        Ok(())
    }

    pub fn grid(&self, extent: Extent) -> Result<SceneGrid> {
        SceneGrid::new(extent, self.grid_rows, self.grid_cols)
    }
}

/// Pooled summary of the *other* present agents' positions, normalised to
/// `[-1, 1]²` by `extent`: `[mean_x, mean_y, max_x, max_y]`, zeros when
/// the agent is alone. Returns `[n, 4]`.
pub fn disposition(positions: &[Point], present: &[bool], extent: &Extent) -> Tensor {
    let n = positions.len();
    let norm: Vec<Point> = positions.iter().map(|&p| extent.normalize(p)).collect();
    let mut data = Vec::with_capacity(n * DISPOSITION_DIM);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        xs.clear();
        ys.clear();
        for j in 0..n {
            if j != i && present[j] {
                xs.push(norm[j][0]);
                ys.push(norm[j][1]);
            }
        }
        if xs.is_empty() {
            data.extend_from_slice(&[0.0; DISPOSITION_DIM]);
            continue;
        }
        let count = xs.len() as f64;
        let max_x = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let max_y = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        data.push(sorted_sum(&mut xs) / count);
        data.push(sorted_sum(&mut ys) / count);
        data.push(max_x);
        data.push(max_y);
    }
    Tensor::new(&[n, DISPOSITION_DIM], data).expect("disposition shape")
}

/// Per-scene inputs of the training loss, computed once.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub num_agents: usize,
    /// Scaled displacement `x_s = (p[s+1] − p[s]) / scale`, `[n, 2]`.
    pub displacements: Vec<Tensor>,
    /// Agents present at both ends of step `s`.
    pub valid: Vec<Vec<bool>>,
    /// Ground-truth goal one-hots for step `s`, `[n, K]` (goal variants only).
    pub goals: Vec<Tensor>,
    /// Disposition at the start of step `s`.
    pub dispositions: Vec<Tensor>,
    /// Goal-graph topology at the start of step `s`.
    pub goal_topologies: Vec<GraphTopology>,
    /// Hidden-state topology at the end of step `s`.
    pub hidden_topologies: Vec<GraphTopology>,
}

impl PreparedScene {
    pub fn steps(&self) -> usize {
        self.displacements.len()
    }
}

/// Loss of one scene. `total` lives on the session's tape.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: Var,
    pub reconstruction: f64,
    pub kl: f64,
    pub cross_entropy: f64,
    /// Steps with at least one valid agent.
    pub valid_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOptions {
    pub obs: usize,
    pub pred: usize,
    /// Draw latents and displacements instead of taking means.
    pub sample: bool,
    /// Condition the burn-in on ground-truth goals taken from the observed
    /// prefix instead of the goal network.
    pub ground_truth_goals: bool,
}

impl RolloutOptions {
    pub fn deterministic(obs: usize, pred: usize) -> Self {
        Self {
            obs,
            pred,
            sample: false,
            ground_truth_goals: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// `predicted[agent][k]` is the position at step `obs + k`.
    pub predicted: Vec<Vec<Point>>,
    /// Agents present at the last observed step; only these are forecast.
    pub present: Vec<bool>,
}

/// Parameter handles of all sub-networks.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    phi_x: Mlp,
    phi_z: Mlp,
    enc: Mlp,
    prior: Mlp,
    dec: Mlp,
    rnn: GruCell,
    phi_goal: Option<Mlp>,
    pub goal_refiner: Option<GraphRefiner>,
    pub hidden_refiner: Option<GraphRefiner>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let act = c.activation;
        let k = if c.variant.uses_goals() { c.num_cells() } else { 0 };
        let (f, h, z, e) = (c.feature_dim, c.hidden_dim, c.latent_dim, c.head_dim);
        let phi_x = Mlp::new(store, "phi_x", &[2, f], act, true, rng)?;
        let phi_z = Mlp::new(store, "phi_z", &[z, f], act, true, rng)?;
        let enc = Mlp::new(store, "enc", &[f + h + k, e, 2 * z], act, false, rng)?;
        let prior = Mlp::new(store, "prior", &[h + k, e, 2 * z], act, false, rng)?;
        let dec = Mlp::new(store, "dec", &[f + h + k, e, 4], act, false, rng)?;
        let rnn = GruCell::new(store, "rnn", 2 * f, h, rng)?;
        let (phi_goal, goal_refiner) = if c.variant.uses_goals() {
            let net = Mlp::new(store, "phi_goal", &[k + DISPOSITION_DIM + h, e, k], act, false, rng)?;
            let refiner = GraphRefiner::new(store, "goal_refiner", k, c.graph_hidden, rng)?;
            (Some(net), Some(refiner))
        } else {
            (None, None)
        };
        let hidden_refiner = if c.variant.refines_hidden() {
            Some(GraphRefiner::new(store, "hidden_refiner", h, c.graph_hidden, rng)?)
        } else {
            None
        };
        Ok(Self {
            config,
            phi_x,
            phi_z,
            enc,
            prior,
            dec,
            rnn,
            phi_goal,
            goal_refiner,
            hidden_refiner,
        })
    }

    /// Builds a model with parameters initialised from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::new(config, &mut store, &mut rng)?;
        Ok((model, store))
    }

    fn conditioned(&self, s: &mut Session, parts: &[Var], goal: Option<Var>) -> Result<Var> {
        let mut inputs = parts.to_vec();
        if self.config.variant.uses_goals() {
            inputs.push(goal.ok_or_else(|| {
                Error::invalid("model", "goal-conditioned variant needs a goal input")
            })?);
        }
        if inputs.len() == 1 {
            return Ok(inputs[0]);
        }
        s.graph.concat(&inputs, 1)
    }

    pub fn embed_displacement(&self, s: &mut Session, x: Var) -> Result<Var> {
        self.phi_x.forward(s, x)
    }

    pub fn embed_latent(&self, s: &mut Session, z: Var) -> Result<Var> {
        self.phi_z.forward(s, z)
    }

    /// Prior over `z_t` given `h_{t−1}` and, for goal variants, `g_t`.
    pub fn prior_step(&self, s: &mut Session, h_prev: Var, goal: Option<Var>) -> Result<GaussianParams> {
        let input = self.conditioned(s, &[h_prev], goal)?;
        let out = self.prior.forward(s, input)?;
        GaussianParams::from_head(&mut s.graph, out, self.config.latent_dim)
    }

    /// Posterior over `z_t` from embedded displacement features.
    pub fn encode_features(
        &self,
        s: &mut Session,
        features: Var,
        h_prev: Var,
        goal: Option<Var>,
    ) -> Result<GaussianParams> {
        let input = self.conditioned(s, &[features, h_prev], goal)?;
        let out = self.enc.forward(s, input)?;
        GaussianParams::from_head(&mut s.graph, out, self.config.latent_dim)
    }

    /// Posterior over `z_t` for a scaled displacement `x` of shape `[n, 2]`.
    pub fn encode_step(&self, s: &mut Session, x: Var, h_prev: Var, goal: Option<Var>) -> Result<GaussianParams> {
        let fx = self.embed_displacement(s, x)?;
        self.encode_features(s, fx, h_prev, goal)
    }

    /// Output distribution over the scaled displacement from latent features.
    pub fn decode_features(
        &self,
        s: &mut Session,
        features: Var,
        h_prev: Var,
        goal: Option<Var>,
    ) -> Result<GaussianParams> {
        let input = self.conditioned(s, &[features, h_prev], goal)?;
        let out = self.dec.forward(s, input)?;
        GaussianParams::from_head(&mut s.graph, out, 2)
    }

    pub fn decode_step(&self, s: &mut Session, z: Var, h_prev: Var, goal: Option<Var>) -> Result<GaussianParams> {
        let fz = self.embed_latent(s, z)?;
        self.decode_features(s, fz, h_prev, goal)
    }

    /// Goal distribution `softmax(φ_goal(g'_{t−1}, d_{t−1}, h_{t−1}))`.
    pub fn propose_goal(&self, s: &mut Session, prev_goal: Var, disposition: Var, h_prev: Var) -> Result<Var> {
        let net = self
            .phi_goal
            .as_ref()
            .ok_or_else(|| Error::invalid("propose_goal", "variant has no goal network"))?;
        let input = s.graph.concat(&[prev_goal, disposition, h_prev], 1)?;
        let logits = net.forward(s, input)?;
        s.graph.softmax(logits, 1)
    }

    /// Refines proposed goals across agents and renormalises onto the simplex.
    pub fn refine_goal(&self, s: &mut Session, proposal: Var, topo: &GraphTopology) -> Result<Var> {
        let refiner = self
            .goal_refiner
            .as_ref()
            .ok_or_else(|| Error::invalid("refine_goal", "variant has no goal refiner"))?;
        let refined = refiner.refine(s, proposal, topo)?;
        s.graph.softmax(refined, 1)
    }

    /// GRU update followed, for interacting variants, by hidden refinement
    /// over `topo`.
    pub fn recur(&self, s: &mut Session, fx: Var, fz: Var, h_prev: Var, topo: &GraphTopology) -> Result<Var> {
        let input = s.graph.concat(&[fx, fz], 1)?;
        let h = self.rnn.forward(s, input, h_prev)?;
        match &self.hidden_refiner {
            Some(r) => r.refine(s, h, topo),
            None => Ok(h),
        }
    }

    fn goal_topology(&self, positions: &[Point], present: &[bool]) -> Result<GraphTopology> {
        match self.config.goal_graph {
            GoalGraph::Complete => GraphTopology::complete(positions, present),
            GoalGraph::Distance => {
                GraphTopology::build(positions, self.config.adjacency_threshold, present)
            }
        }
    }

    fn hidden_topology(&self, positions: &[Point], present: &[bool]) -> Result<GraphTopology> {
        GraphTopology::build(positions, self.config.adjacency_threshold, present)
    }

    fn uniform_goal(&self, s: &mut Session, n: usize) -> Var {
        let k = self.config.num_cells();
        s.constant(Tensor::full(&[n, k], 1.0 / k as f64))
    }

    pub fn prepare(&self, scene: &Scene) -> Result<PreparedScene> {
        let t_len = scene.len();
        if t_len < 2 {
            return Err(Error::invalid("prepare", "a scene needs at least 2 steps"));
        }
        let n = scene.num_agents();
        let scale = self.config.displacement_scale;
        let goal_cells = if self.config.variant.uses_goals() {
            let grid = self.config.grid(scene.extent)?;
            Some((
                grid,
                scene
                    .positions
                    .iter()
                    .map(|p| grid.goal_cells(p, self.config.goal_window))
                    .collect::<Result<Vec<_>>>()?,
            ))
        } else {
            None
        };
        let mut prepared = PreparedScene {
            num_agents: n,
            displacements: Vec::with_capacity(t_len - 1),
            valid: Vec::with_capacity(t_len - 1),
            goals: Vec::new(),
            dispositions: Vec::new(),
            goal_topologies: Vec::new(),
            hidden_topologies: Vec::new(),
        };
        for step in 0..t_len - 1 {
            let here = scene.positions_at(step);
            let next = scene.positions_at(step + 1);
            let present = scene.present_at(step);
            let present_next = scene.present_at(step + 1);
            let valid: Vec<bool> = present.iter().zip(&present_next).map(|(&a, &b)| a && b).collect();
            let mut disp = Vec::with_capacity(2 * n);
            for i in 0..n {
                if valid[i] {
                    disp.push((next[i][0] - here[i][0]) / scale);
                    disp.push((next[i][1] - here[i][1]) / scale);
                } else {
                    disp.extend_from_slice(&[0.0, 0.0]);
                }
            }
            prepared.displacements.push(Tensor::new(&[n, 2], disp)?);
            if let Some((grid, cells)) = &goal_cells {
                let k = grid.num_cells();
                let mut onehot = vec![0.0; n * k];
                for i in 0..n {
                    onehot[i * k + cells[i][step + 1]] = 1.0;
                }
                prepared.goals.push(Tensor::new(&[n, k], onehot)?);
                prepared.dispositions.push(disposition(&here, &present, &scene.extent));
                prepared.goal_topologies.push(self.goal_topology(&here, &present)?);
            }
            if self.config.variant.refines_hidden() {
                prepared
                    .hidden_topologies
                    .push(self.hidden_topology(&next, &present_next)?);
            }
            prepared.valid.push(valid);
        }
        Ok(prepared)
    }

    /// Negative ELBO plus the weighted goal cross-entropy, summed over the
    /// valid agent-steps of one scene.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        s: &mut Session,
        scene: &PreparedScene,
        rng: &mut R,
    ) -> Result<LossBreakdown> {
        let n = scene.num_agents;
        let c = &self.config;
        let zd = c.latent_dim;
        let mut h = s.constant(Tensor::zeros(&[n, c.hidden_dim]));
        let mut prev_goal = c.variant.uses_goals().then(|| self.uniform_goal(s, n));
        let mut total: Option<Var> = None;
        let (mut rec_sum, mut kl_sum, mut ce_sum) = (0.0, 0.0, 0.0);
        let mut valid_steps = 0;
        for step in 0..scene.steps() {
            let valid = &scene.valid[step];
            let row_mask = |width: usize| {
                let data = valid
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(if v { 1.0 } else { 0.0 }, width))
                    .collect();
                Tensor::new(&[n, width], data).expect("mask shape")
            };

            let mut goal_hat = None;
            let mut cond = None;
            if let Some(pg) = prev_goal {
                let d = s.constant(scene.dispositions[step].clone());
                let proposal = self.propose_goal(s, pg, d, h)?;
                let refined = self.refine_goal(s, proposal, &scene.goal_topologies[step])?;
                goal_hat = Some(refined);
                cond = Some(if c.teacher_forcing {
                    s.constant(scene.goals[step].clone())
                } else {
                    refined
                });
            }

            let x = s.constant(scene.displacements[step].clone());
            let fx = self.embed_displacement(s, x)?;
            let q = self.encode_features(s, fx, h, cond)?;
            let p = self.prior_step(s, h, cond)?;
            let eps = s.constant(Tensor::standard_normal(&[n, zd], rng));
            let z = gaussian::sample_reparameterized(&mut s.graph, &q, eps)?;
            let fz = self.embed_latent(s, z)?;
            let out = self.decode_features(s, fz, h, cond)?;

            let g = &mut s.graph;
            let lp = gaussian::log_prob_terms(g, &out, x)?;
            let m2 = g.constant(row_mask(2));
            let lp = g.mul(lp, m2)?;
            let lp = g.sum(lp)?;
            let rec = g.neg(lp)?;
            let kl = gaussian::kl_terms(g, &q, &p)?;
            let mz = g.constant(row_mask(zd));
            let kl = g.mul(kl, mz)?;
            let kl = g.sum(kl)?;
            let mut step_loss = g.add(rec, kl)?;
            rec_sum += g.value(rec).item()?;
            kl_sum += g.value(kl).item()?;
            if let Some(gh) = goal_hat {
                let ce = gaussian::cross_entropy_rows(g, &scene.goals[step], gh, valid)?;
                ce_sum += g.value(ce).item()?;
                let weighted = g.scale(ce, c.ce_weight)?;
                step_loss = g.add(step_loss, weighted)?;
            }
            if !g.value(step_loss).item()?.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            total = Some(match total {
                Some(t) => g.add(t, step_loss)?,
                None => step_loss,
            });
            if valid.iter().any(|&v| v) {
                valid_steps += 1;
            }

            let topo = scene.hidden_topologies.get(step);
            h = match topo {
                Some(t) => self.recur(s, fx, fz, h, t)?,
                None => {
                    let input = s.graph.concat(&[fx, fz], 1)?;
                    self.rnn.forward(s, input, h)?
                }
            };
            prev_goal = goal_hat;
        }
        Ok(LossBreakdown {
            total: total.expect("at least one step"),
            reconstruction: rec_sum,
            kl: kl_sum,
            cross_entropy: ce_sum,
            valid_steps,
        })
    }

    /// One-step reconstructions over the whole scene under the training
    /// conditioning: posterior-mean latents and decoder means, so
    /// `out[i][s]` estimates the position at step `s + 1` from the true
    /// position at `s`. Entries of invalid steps are `[0, 0]`.
    pub fn reconstruct(&self, store: &ParamStore, scene: &Scene) -> Result<Vec<Vec<Point>>> {
        let prepared = self.prepare(scene)?;
        let c = &self.config;
        let n = prepared.num_agents;
        let mut s = Session::new(store, false);
        let mut h = s.constant(Tensor::zeros(&[n, c.hidden_dim]));
        let mut prev_goal = c.variant.uses_goals().then(|| self.uniform_goal(&mut s, n));
        let mut out = vec![Vec::with_capacity(prepared.steps()); n];
        for step in 0..prepared.steps() {
            let mut cond = None;
            if let Some(pg) = prev_goal {
                let d = s.constant(prepared.dispositions[step].clone());
                let proposal = self.propose_goal(&mut s, pg, d, h)?;
                let refined = self.refine_goal(&mut s, proposal, &prepared.goal_topologies[step])?;
                prev_goal = Some(refined);
                cond = Some(if c.teacher_forcing {
                    s.constant(prepared.goals[step].clone())
                } else {
                    refined
                });
            }
            let x = s.constant(prepared.displacements[step].clone());
            let fx = self.embed_displacement(&mut s, x)?;
            let q = self.encode_features(&mut s, fx, h, cond)?;
            let fz = self.embed_latent(&mut s, q.mean)?;
            let dec = self.decode_features(&mut s, fz, h, cond)?;
            let mean = s.value(dec.mean).clone();
            let here = scene.positions_at(step);
            for (i, track) in out.iter_mut().enumerate() {
                track.push(if prepared.valid[step][i] {
                    [
                        here[i][0] + mean.get2(i, 0) * c.displacement_scale,
                        here[i][1] + mean.get2(i, 1) * c.displacement_scale,
                    ]
                } else {
                    [0.0, 0.0]
                });
            }
            h = match prepared.hidden_topologies.get(step) {
                Some(t) => self.recur(&mut s, fx, fz, h, t)?,
                None => {
                    let input = s.graph.concat(&[fx, fz], 1)?;
                    self.rnn.forward(&mut s, input, h)?
                }
            };
        }
        Ok(out)
    }

    /// Burns in on the first `obs` steps of `scene`, then generates `pred`
    /// positions per agent.
    pub fn rollout<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        scene: &Scene,
        opts: &RolloutOptions,
        rng: &mut R,
    ) -> Result<Rollout> {
        if opts.obs == 0 || opts.pred == 0 {
            return Err(Error::invalid("rollout", "obs and pred must be at least 1"));
        }
        if scene.len() < opts.obs {
            return Err(Error::invalid(
                "rollout",
                format!("prefix has {} steps, need {}", scene.len(), opts.obs),
            ));
        }
        let c = &self.config;
        let n = scene.num_agents();
        let scale = c.displacement_scale;
        let mut s = Session::new(store, false);

        let burn_goals = if c.variant.uses_goals() && opts.ground_truth_goals {
            let grid = c.grid(scene.extent)?;
            Some(
                scene
                    .positions
                    .iter()
                    .map(|p| grid.goal_cells(&p[..opts.obs], c.goal_window))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };

        let mut h = s.constant(Tensor::zeros(&[n, c.hidden_dim]));
        let mut prev_goal = c.variant.uses_goals().then(|| self.uniform_goal(&mut s, n));
        let mut here = scene.positions_at(0);
        let mut present = scene.present_at(0);
        let last_present = scene.present_at(opts.obs - 1);
        let mut predicted = vec![Vec::with_capacity(opts.pred); n];

        let total = opts.obs - 1 + opts.pred;
        for step in 0..total {
            let burn_in = step + 1 < opts.obs;
            let mut cond = None;
            if let Some(pg) = prev_goal {
                let d = s.constant(disposition(&here, &present, &scene.extent));
                let proposal = self.propose_goal(&mut s, pg, d, h)?;
                let topo = self.goal_topology(&here, &present)?;
                let refined = self.refine_goal(&mut s, proposal, &topo)?;
                prev_goal = Some(refined);
                cond = Some(match (&burn_goals, burn_in) {
                    (Some(cells), true) => {
                        let k = c.num_cells();
                        let mut onehot = vec![0.0; n * k];
                        for i in 0..n {
                            onehot[i * k + cells[i][step + 1]] = 1.0;
                        }
                        s.constant(Tensor::new(&[n, k], onehot)?)
                    }
                    _ => refined,
                });
            }

            let (next, next_present, fx, fz) = if burn_in {
                let next = scene.positions_at(step + 1);
                let next_present = scene.present_at(step + 1);
                let mut disp = Vec::with_capacity(2 * n);
                for i in 0..n {
                    if present[i] && next_present[i] {
                        disp.push((next[i][0] - here[i][0]) / scale);
                        disp.push((next[i][1] - here[i][1]) / scale);
                    } else {
                        disp.extend_from_slice(&[0.0, 0.0]);
                    }
                }
                let x = s.constant(Tensor::new(&[n, 2], disp)?);
                let fx = self.embed_displacement(&mut s, x)?;
                let q = self.encode_features(&mut s, fx, h, cond)?;
                let z = self.draw(&mut s, &q, opts.sample, rng)?;
                let fz = self.embed_latent(&mut s, z)?;
                (next, next_present, fx, fz)
            } else {
                let p = self.prior_step(&mut s, h, cond)?;
                let z = self.draw(&mut s, &p, opts.sample, rng)?;
                let fz = self.embed_latent(&mut s, z)?;
                let out = self.decode_features(&mut s, fz, h, cond)?;
                let x = self.draw(&mut s, &out, opts.sample, rng)?;
                let xv = s.value(x).clone();
                let next: Vec<Point> = (0..n)
                    .map(|i| {
                        if last_present[i] {
                            [here[i][0] + xv.get2(i, 0) * scale, here[i][1] + xv.get2(i, 1) * scale]
                        } else {
                            [0.0, 0.0]
                        }
                    })
                    .collect();
                for (i, track) in predicted.iter_mut().enumerate() {
                    track.push(next[i]);
                }
                let fx = self.embed_displacement(&mut s, x)?;
                (next, last_present.clone(), fx, fz)
            };

            let topo = self.hidden_topology(&next, &next_present)?;
            h = self.recur(&mut s, fx, fz, h, &topo)?;
            here = next;
            present = next_present;
        }
        Ok(Rollout {
            predicted,
            present: last_present,
        })
    }

    fn draw<R: Rng + ?Sized>(
        &self,
        s: &mut Session,
        p: &GaussianParams,
        sample: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !sample {
            return Ok(p.mean);
        }
        let shape = s.graph.shape(p.mean).to_vec();
        let eps = s.constant(Tensor::standard_normal(&shape, rng));
        gaussian::sample_reparameterized(&mut s.graph, p, eps)
    }
}
