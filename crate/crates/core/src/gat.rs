//! Multi-head graph attention and the two-layer refiners that distil goals
//! and hidden states across agents.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::grid::Point;
use crate::nn::{xavier_bound, Activation, Linear, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

pub const NUM_HEADS: usize = 4;
pub const ATTENTION_SLOPE: f64 = 0.2;

/// Neighbourhood structure of the agents at one time-step.
///
/// Row-major `n × n` matrices. Every node has a self-loop; absent agents
/// have nothing else and are never anyone's neighbour.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphTopology {
    pub num_nodes: usize,
    pub adjacency: Vec<bool>,
    pub distances: Vec<f64>,
    pub present: Vec<bool>,
}

impl GraphTopology {
    /// Edge `(i, j)` iff `i == j` or both agents are present and at most
    /// `threshold` apart.
    pub fn build(positions: &[Point], threshold: f64, present: &[bool]) -> Result<Self> {
        let n = positions.len();
        if n == 0 {
            return Err(Error::invalid("build_topology", "no agents"));
        }
        if threshold.is_nan() || threshold < 0.0 {
            return Err(Error::invalid(
                "build_topology",
                format!("threshold must be non-negative, got {threshold}"),
            ));
        }
        if present.len() != n {
            return Err(Error::invalid(
                "build_topology",
                format!("{} presence flags for {n} agents", present.len()),
            ));
        }
        let mut distances = vec![0.0; n * n];
        let mut adjacency = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                let d = if i == j {
                    0.0
                } else {
                    let dx = positions[i][0] - positions[j][0];
                    let dy = positions[i][1] - positions[j][1];
                    dx.hypot(dy)
                };
                distances[i * n + j] = d;
                adjacency[i * n + j] = i == j || (present[i] && present[j] && d <= threshold);
            }
        }
        Ok(Self {
            num_nodes: n,
            adjacency,
            distances,
            present: present.to_vec(),
        })
    }

    /// Every present agent connected to every other present agent.
    pub fn complete(positions: &[Point], present: &[bool]) -> Result<Self> {
        Self::build(positions, f64::INFINITY, present)
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.num_nodes + j]
    }

    pub fn num_present(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    /// Relabels nodes: node `i` of the result is node `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.num_nodes;
        let mut out = self.clone();
        for i in 0..n {
            out.present[i] = self.present[perm[i]];
            for j in 0..n {
                out.adjacency[i * n + j] = self.adjacency[perm[i] * n + perm[j]];
                out.distances[i * n + j] = self.distances[perm[i] * n + perm[j]];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMerge {
    Concat,
    Mean,
}

#[derive(Debug, Clone)]
struct Head {
    weight: ParamId,
    attention: ParamId,
}

/// One graph-attention layer with [`NUM_HEADS`] heads.
#[derive(Debug, Clone)]
pub struct GatLayer {
    heads: Vec<Head>,
    pub in_dim: usize,
    pub head_dim: usize,
    pub merge: HeadMerge,
    pub activation: Activation,
}

impl GatLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        head_dim: usize,
        merge: HeadMerge,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut heads = Vec::with_capacity(NUM_HEADS);
        for h in 0..NUM_HEADS {
            let a = xavier_bound(in_dim, head_dim);
            let weight = store.add(
                format!("{name}.head{h}.weight"),
                Tensor::uniform(&[head_dim, in_dim], -a, a, rng),
            )?;
            let a = xavier_bound(2 * head_dim, 1);
            let attention = store.add(
                format!("{name}.head{h}.attention"),
                Tensor::uniform(&[1, 2 * head_dim], -a, a, rng),
            )?;
            heads.push(Head { weight, attention });
        }
        Ok(Self {
            heads,
            in_dim,
            head_dim,
            merge,
            activation,
        })
    }

    pub fn out_dim(&self) -> usize {
        match self.merge {
            HeadMerge::Concat => self.head_dim * NUM_HEADS,
            HeadMerge::Mean => self.head_dim,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, topo: &GraphTopology) -> Result<Var> {
        Ok(self.forward_with_attention(s, x, topo)?.0)
    }

    /// Layer output together with each head's `[n, n]` attention matrix.
    pub fn forward_with_attention(
        &self,
        s: &mut Session,
        x: Var,
        topo: &GraphTopology,
    ) -> Result<(Var, Vec<Var>)> {
        let shape = s.graph.shape(x).to_vec();
        let n = topo.num_nodes;
        if shape != [n, self.in_dim] {
            return Err(Error::ShapeMismatch {
                op: "gat_forward",
                lhs: shape,
                rhs: vec![n, self.in_dim],
            });
        }
        let ones_row = s.constant(Tensor::ones(&[1, n]));
        let ones_col = s.constant(Tensor::ones(&[n, 1]));
        let mut outputs = Vec::with_capacity(self.heads.len());
        let mut alphas = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let w = s.var(head.weight);
            let attn = s.var(head.attention);
            let g = &mut s.graph;
            let wh = g.matmul_bt(x, w)?;
            let a_src = g.narrow(attn, 1, 0, self.head_dim)?;
            let a_dst = g.narrow(attn, 1, self.head_dim, self.head_dim)?;
            // e_ij = leakyReLU(a_srcᵀ W f_i + a_dstᵀ W f_j)
            let src = g.matmul_bt(wh, a_src)?;
            let dst = g.matmul_bt(a_dst, wh)?;
            let src = g.matmul(src, ones_row)?;
            let dst = g.matmul(ones_col, dst)?;
            let scores = g.add(src, dst)?;
            let scores = g.leaky_relu(scores, ATTENTION_SLOPE)?;
            let alpha = g.masked_softmax(scores, &topo.adjacency)?;
            outputs.push(g.aggregate(alpha, wh)?);
            alphas.push(alpha);
        }
        let g = &mut s.graph;
        let merged = match self.merge {
            HeadMerge::Concat => g.concat(&outputs, 1)?,
            HeadMerge::Mean => {
                let mut acc = outputs[0];
                for &o in &outputs[1..] {
                    acc = g.add(acc, o)?;
                }
                g.scale(acc, 1.0 / outputs.len() as f64)?
            }
        };
        let out = self.activation.apply(g, merged)?;
        Ok((out, alphas))
    }
}

/// Two attention layers (`d → hidden·heads → d`) followed by a linear
/// projection of `[features ∥ distilled]` back to `d`.
#[derive(Debug, Clone)]
pub struct GraphRefiner {
    pub first: GatLayer,
    pub second: GatLayer,
    pub projection: Linear,
    pub dim: usize,
}

impl GraphRefiner {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let first = GatLayer::new(
            store,
            &format!("{name}.gat0"),
            dim,
            hidden,
            HeadMerge::Concat,
            Activation::Elu,
            rng,
        )?;
        let second = GatLayer::new(
            store,
            &format!("{name}.gat1"),
            first.out_dim(),
            dim,
            HeadMerge::Mean,
            Activation::Identity,
            rng,
        )?;
        let projection = Linear::new(store, &format!("{name}.proj"), 2 * dim, dim, rng)?;
        Ok(Self {
            first,
            second,
            projection,
            dim,
        })
    }

    pub fn distill(&self, s: &mut Session, features: Var, topo: &GraphTopology) -> Result<Var> {
        let h = self.first.forward(s, features, topo)?;
        self.second.forward(s, h, topo)
    }

    pub fn refine(&self, s: &mut Session, features: Var, topo: &GraphTopology) -> Result<Var> {
        if s.graph.shape(features).last() != Some(&self.dim) {
            return Err(Error::ShapeMismatch {
                op: "refine",
                lhs: s.graph.shape(features).to_vec(),
                rhs: vec![topo.num_nodes, self.dim],
            });
        }
        let distilled = self.distill(s, features, topo)?;
        let joined = s.graph.concat(&[features, distilled], 1)?;
        self.projection.forward(s, joined)
    }

    /// Sets the projection to `[I | 0]` with zero bias, making `refine` the
    /// identity.
    pub fn set_pass_through(&self, store: &mut ParamStore) {
        let d = self.dim;
        let mut w = Tensor::zeros(&[d, 2 * d]);
        for i in 0..d {
            w.data_mut()[i * 2 * d + i] = 1.0;
        }
        *store.get_mut(self.projection.weight) = w;
        *store.get_mut(self.projection.bias) = Tensor::zeros(&[d]);
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn threshold_edges() {
        let pos = [[0.0, 0.0], [1.0, 0.0]];
        let near = GraphTopology::build(&pos, 2.0, &[true, true]).unwrap();
        assert!(near.adjacency.iter().all(|&e| e));
        let far = GraphTopology::build(&[[0.0, 0.0], [5.0, 0.0]], 2.0, &[true, true]).unwrap();
        assert_eq!(far.adjacency, vec![true, false, false, true]);
        let inf = GraphTopology::build(
            &[[0.0, 0.0], [1e9, 0.0], [0.0, -1e9]],
            f64::INFINITY,
            &[true; 3],
        )
        .unwrap();
        assert!(inf.adjacency.iter().all(|&e| e));
        assert_eq!(near.distances, vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn absent_agents_keep_only_self_loop() {
        let pos = [[0.0, 0.0], [0.5, 0.0], [0.2, 0.1]];
        let t = GraphTopology::build(&pos, 10.0, &[true, false, true]).unwrap();
        assert!(t.has_edge(1, 1));
        for j in [0, 2] {
            assert!(!t.has_edge(1, j));
            assert!(!t.has_edge(j, 1));
        }
        assert!(t.has_edge(0, 2));
        assert_eq!(t.num_present(), 2);
    }

    #[test]
    fn topology_errors() {
        assert!(GraphTopology::build(&[], 1.0, &[]).is_err());
        assert!(GraphTopology::build(&[[0.0, 0.0]], -1.0, &[true]).is_err());
        assert!(GraphTopology::build(&[[0.0, 0.0]], 1.0, &[true, true]).is_err());
    }

    fn layer(in_dim: usize, head_dim: usize) -> (ParamStore, GatLayer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = GatLayer::new(
            &mut store,
            "gat",
            in_dim,
            head_dim,
            HeadMerge::Concat,
            Activation::Elu,
            &mut rng,
        )
        .unwrap();
        (store, l)
    }

    #[test]
    fn isolated_node_attends_to_itself() {
        let (store, l) = layer(3, 2);
        let topo = GraphTopology::build(&[[0.0, 0.0], [9.0, 9.0]], 1.0, &[true, true]).unwrap();
        let mut s = Session::new(&store, false);
        let x = s.constant(Tensor::new(&[2, 3], vec![0.3, -0.2, 0.9, 1.0, 0.4, -0.7]).unwrap());
        let (out, alphas) = l.forward_with_attention(&mut s, x, &topo).unwrap();
        for a in &alphas {
            assert_eq!(s.value(*a).data(), &[1.0, 0.0, 0.0, 1.0]);
        }
        // output = ELU(W f_i) per head
        for (h, head) in l.heads.iter().enumerate() {
            let w = store.get(head.weight);
            for i in 0..2 {
                for c in 0..2 {
                    let pre: f64 = (0..3).map(|k| w.get2(c, k) * s.value(x).get2(i, k)).sum();
                    let want = if pre > 0.0 { pre } else { pre.exp_m1() };
                    let got = s.value(out).get2(i, h * 2 + c);
                    assert!((got - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn identical_features_split_attention_evenly() {
        let (store, l) = layer(4, 3);
        let topo = GraphTopology::complete(&[[0.0, 0.0], [1.0, 1.0]], &[true, true]).unwrap();
        let mut s = Session::new(&store, false);
        let x = s.constant(Tensor::new(&[2, 4], vec![0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4]).unwrap());
        let (_, alphas) = l.forward_with_attention(&mut s, x, &topo).unwrap();
        for a in alphas {
            assert_eq!(s.value(a).data(), &[0.5, 0.5, 0.5, 0.5]);
        }
    }

    #[test]
    fn pass_through_refiner_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = GraphRefiner::new(&mut store, "ref", 6, 4, &mut rng).unwrap();
        r.set_pass_through(&mut store);
        let topo = GraphTopology::complete(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], &[true; 3]).unwrap();
        let x_val = Tensor::uniform(&[3, 6], -2.0, 2.0, &mut rng);
        let mut s = Session::new(&store, false);
        let x = s.constant(x_val.clone());
        let y = r.refine(&mut s, x, &topo).unwrap();
        assert_eq!(s.value(y), &x_val);
    }

    #[test]
    fn refine_rejects_wrong_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = GraphRefiner::new(&mut store, "ref", 6, 4, &mut rng).unwrap();
        let topo = GraphTopology::complete(&[[0.0, 0.0]], &[true]).unwrap();
        let mut s = Session::new(&store, false);
        let x = s.constant(Tensor::zeros(&[1, 5]));
        assert!(r.refine(&mut s, x, &topo).is_err());
    }
}
