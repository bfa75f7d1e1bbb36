//! Stage I pose encoder: graph convolutions over the skeleton followed by
//! per-node MLPs with individual weights, emitting one feature block per
//! bone. Runs once per pose; every query point reuses the result.
//!
//! Node inputs are the bones' 6D rotations (parent-relative joint angles);
//! the root translation is excluded so the encoding stays translation
//! invariant. Two graph layers bound the receptive field to the 2-hop
//! neighborhood, which is what keeps distant body parts disentangled.

use crate::params::{Init, LiftedParams, ParamStore};
use crate::tape::{concat_rows, Tape, Var};
use crate::tensor::{Result, Tensor};

/// Symmetrically normalized adjacency with self-loops:
/// `D^-1/2 (A + I) D^-1/2`.
pub fn normalized_adjacency(adj: &[Vec<bool>]) -> Tensor {
    let n = adj.len();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
        for j in 0..n {
            if adj[i][j] {
                a[i * n + j] = 1.0;
            }
        }
    }
    let deg: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| a[i * n + j]).sum::<f64>())
        .collect();
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] /= (deg[i] * deg[j]).sqrt();
        }
    }
    Tensor::new(&[n, n], a).unwrap()
}

pub fn adjacency_rows(adj: &[[bool; crate::kinematics::NUM_BONES]]) -> Vec<Vec<bool>> {
    adj.iter().map(|row| row.to_vec()).collect()
}

/// One graph-convolution layer: `leaky(Ahat @ (X W) + b)`.
pub fn graph_conv<'t>(
    node_feats: Var<'t>,
    norm_adj: Var<'t>,
    w: Var<'t>,
    b: Var<'t>,
    leaky: f64,
) -> Result<Var<'t>> {
    let mixed = norm_adj.matmul(node_feats.matmul(w)?)?;
    Ok(mixed.add_row(b)?.leaky_relu(leaky))
}

/// Shapes and naming for the pose encoder's parameters. `n_nodes` is
/// generic so small test graphs work; the model uses the 24-bone skeleton.
#[derive(Debug, Clone)]
pub struct PoseEncoder {
    pub name: String,
    pub n_nodes: usize,
    pub in_dim: usize,
    pub hidden: usize,
    /// Per-node output width (3*H*M axis features for factorized volumes).
    pub out_dim: usize,
    pub leaky: f64,
}

impl PoseEncoder {
    pub fn new(name: &str, n_nodes: usize, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        PoseEncoder {
            name: name.to_string(),
            n_nodes,
            in_dim,
            hidden,
            out_dim,
            leaky: 0.01,
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) {
        let n = &self.name;
        store.insert(
            &format!("{n}.conv1.w"),
            init.linear_weight(self.in_dim, self.hidden),
        );
        store.insert(&format!("{n}.conv1.b"), Tensor::zeros(&[1, self.hidden]));
        store.insert(
            &format!("{n}.conv2.w"),
            init.linear_weight(self.hidden, self.hidden),
        );
        store.insert(&format!("{n}.conv2.b"), Tensor::zeros(&[1, self.hidden]));
        for i in 0..self.n_nodes {
            store.insert(
                &format!("{n}.node{i}.l1.w"),
                init.linear_weight(self.hidden, self.hidden),
            );
            store.insert(&format!("{n}.node{i}.l1.b"), Tensor::zeros(&[1, self.hidden]));
            store.insert(
                &format!("{n}.node{i}.l2.w"),
                init.linear_weight(self.hidden, self.hidden),
            );
            store.insert(&format!("{n}.node{i}.l2.b"), Tensor::zeros(&[1, self.hidden]));
            store.insert(
                &format!("{n}.head{i}.w"),
                init.linear_weight(self.hidden, self.out_dim),
            );
            store.insert(&format!("{n}.head{i}.b"), Tensor::zeros(&[1, self.out_dim]));
        }
    }

    pub fn param_count(&self) -> usize {
        let conv = self.in_dim * self.hidden + self.hidden * self.hidden + 2 * self.hidden;
        let per_node = 2 * (self.hidden * self.hidden + self.hidden)
            + self.hidden * self.out_dim
            + self.out_dim;
        conv + self.n_nodes * per_node
    }

    /// Forward pass: `node_feats` is `[n_nodes, in_dim]`, returns one
    /// `[1, out_dim]` block per node.
    pub fn encode<'t>(
        &self,
        tape: &'t Tape,
        params: &LiftedParams<'t>,
        node_feats: Var<'t>,
        norm_adj: &Tensor,
    ) -> Result<Vec<Var<'t>>> {
        let n = &self.name;
        let adj = tape.constant(norm_adj.clone());
        let x1 = graph_conv(
            node_feats,
            adj,
            params.var(&format!("{n}.conv1.w")),
            params.var(&format!("{n}.conv1.b")),
            self.leaky,
        )?;
        let x2 = graph_conv(
            x1,
            adj,
            params.var(&format!("{n}.conv2.w")),
            params.var(&format!("{n}.conv2.b")),
            self.leaky,
        )?;
        let mut out = Vec::with_capacity(self.n_nodes);
        for i in 0..self.n_nodes {
            let e = x2.slice_rows(i, i + 1)?;
            let e = e
                .matmul(params.var(&format!("{n}.node{i}.l1.w")))?
                .add_row(params.var(&format!("{n}.node{i}.l1.b")))?
                .leaky_relu(self.leaky);
            let e = e
                .matmul(params.var(&format!("{n}.node{i}.l2.w")))?
                .add_row(params.var(&format!("{n}.node{i}.l2.b")))?
                .leaky_relu(self.leaky);
            let head = e
                .matmul(params.var(&format!("{n}.head{i}.w")))?
                .add_row(params.var(&format!("{n}.head{i}.b")))?;
            out.push(head);
        }
        Ok(out)
    }
}

/// Pose rotations as GNN node features: `[24, 6]`.
pub fn pose_node_features(pose: &crate::kinematics::Pose) -> Tensor {
    let mut data = Vec::with_capacity(crate::kinematics::NUM_BONES * 6);
    for r in &pose.rotations {
        data.extend_from_slice(r);
    }
    Tensor::new(&[crate::kinematics::NUM_BONES, 6], data).unwrap()
}

/// Stack per-node heads into one `[n_nodes, out_dim]` tensor (test helper
/// and ablation plumbing).
pub fn stack_nodes<'t>(tape: &'t Tape, nodes: &[Var<'t>]) -> Result<Var<'t>> {
    concat_rows(tape, nodes)
}
