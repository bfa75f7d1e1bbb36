//! Stage II aggregation: per-bone blend weights and the weighted feature
//! sum that feeds the neural field.
//!
//! Strategies:
//! - `concat`: no weighting, all 24 per-bone features concatenated.
//! - `softmax`: plain softmax over all 24 logits.
//! - `softmax-oob`: softmax restricted to in-bound bones
//!   (`p_i = (1-o_i) e^{a_i} / sum_j (1-o_j) e^{a_j}`).
//! - `sum-oob`: weight 1 for every in-bound bone.
//! - `sigmoid-oob`: `p_i = (1-o_i) sigmoid(a_i)`, no constraint loss.
//! - `soft-softmax`: same weights as sigmoid-oob plus the constraint
//!   `L_s = sum_x (sum_i (1-o_i) p_i - l_x)^2` pushing the in-bound weight
//!   sum toward the occupancy target.
//!
//! The logit network is a graph layer followed by per-node 2-layer MLPs
//! (width 32) with individual weights per bone; a config flag drops the
//! graph layer so logits depend on the bone's own feature only.
//!
//! The training path evaluates everything on sparse (point, bone) pairs:
//! out-of-bound bones never enter the pair set, which makes the hard-zero
//! guarantee exact by construction. Because a graph layer sees zero
//! features for absent neighbors, the sparse evaluation matches the dense
//! one bit-for-bit.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::kinematics::NUM_BONES;
use crate::params::{Init, LiftedParams, ParamStore};
use crate::tape::{concat_rows, sigmoid_f, Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationStrategy {
    Concat,
    Softmax,
    SoftmaxOob,
    SumOob,
    SigmoidOob,
    SoftSoftmax,
}

impl AggregationStrategy {
    pub const ALL: [AggregationStrategy; 6] = [
        AggregationStrategy::Concat,
        AggregationStrategy::Softmax,
        AggregationStrategy::SoftmaxOob,
        AggregationStrategy::SumOob,
        AggregationStrategy::SigmoidOob,
        AggregationStrategy::SoftSoftmax,
    ];

    /// Strategies that zero out-of-bound bones exactly.
    pub fn zeroes_oob(&self) -> bool {
        !matches!(
            self,
            AggregationStrategy::Softmax | AggregationStrategy::Concat
        )
    }

    /// Whether the soft-softmax constraint loss applies.
    pub fn uses_constraint(&self) -> bool {
        matches!(self, AggregationStrategy::SoftSoftmax)
    }

    /// Whether every bone's logit is needed per point (instead of only the
    /// in-bound ones).
    pub fn needs_all_bones(&self) -> bool {
        matches!(self, AggregationStrategy::Softmax)
    }

    pub fn name(&self) -> &'static str {
        match self {
            AggregationStrategy::Concat => "concat",
            AggregationStrategy::Softmax => "softmax",
            AggregationStrategy::SoftmaxOob => "softmax-oob",
            AggregationStrategy::SumOob => "sum-oob",
            AggregationStrategy::SigmoidOob => "sigmoid-oob",
            AggregationStrategy::SoftSoftmax => "soft-softmax",
        }
    }
}

impl std::str::FromStr for AggregationStrategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        AggregationStrategy::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown aggregation strategy `{s}`"))
    }
}

impl std::fmt::Display for AggregationStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

// ── value-level weight functions (public API and test oracles) ──────────

/// Plain softmax over all 24 logits.
pub fn weights_softmax(a: &[f64; NUM_BONES]) -> [f64; NUM_BONES] {
    let mx = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e = [0.0; NUM_BONES];
    let mut s = 0.0;
    for i in 0..NUM_BONES {
        e[i] = (a[i] - mx).exp();
        s += e[i];
    }
    e.map(|v| v / s)
}

/// Softmax over in-bound bones only; all bones out-of-bound yields all
/// zeros (such points never reach the field).
pub fn weights_softmax_oob(a: &[f64; NUM_BONES], oob: &[bool; NUM_BONES]) -> [f64; NUM_BONES] {
    let mx = a
        .iter()
        .zip(oob)
        .filter(|(_, &o)| !o)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return [0.0; NUM_BONES];
    }
    let mut e = [0.0; NUM_BONES];
    let mut s = 0.0;
    for i in 0..NUM_BONES {
        if !oob[i] {
            e[i] = (a[i] - mx).exp();
            s += e[i];
        }
    }
    e.map(|v| v / s)
}

/// Per-bone sigmoid weights: `(1-o_i) * sigmoid(a_i)`, no normalization.
pub fn weights_soft_softmax(a: &[f64; NUM_BONES], oob: &[bool; NUM_BONES]) -> [f64; NUM_BONES] {
    let mut p = [0.0; NUM_BONES];
    for i in 0..NUM_BONES {
        if !oob[i] {
            p[i] = sigmoid_f(a[i]);
        }
    }
    p
}

/// Sigmoid-OOB shares the soft-softmax weights; only the constraint loss
/// differs (absent here).
pub fn weights_sigmoid_oob(a: &[f64; NUM_BONES], oob: &[bool; NUM_BONES]) -> [f64; NUM_BONES] {
    weights_soft_softmax(a, oob)
}

/// Unweighted sum: 1 for every in-bound bone.
pub fn weights_sum_oob(oob: &[bool; NUM_BONES]) -> [f64; NUM_BONES] {
    let mut p = [0.0; NUM_BONES];
    for i in 0..NUM_BONES {
        if !oob[i] {
            p[i] = 1.0;
        }
    }
    p
}

/// Soft-softmax constraint over points: each entry is the in-bound weight
/// sum and the occupancy target l in {0,1}.
pub fn soft_softmax_loss(per_point: &[(f64, f64)]) -> f64 {
    per_point.iter().map(|(s, l)| (s - l) * (s - l)).sum()
}

/// `sum_i p_i h_i` over per-bone features.
pub fn aggregate(features: &[Vec<f64>], weights: &[f64; NUM_BONES]) -> Vec<f64> {
    assert_eq!(features.len(), NUM_BONES);
    let d = features[0].len();
    let mut out = vec![0.0; d];
    for (f, &p) in features.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(f) {
            *o += p * v;
        }
    }
    out
}

/// All 24 per-bone features back to back (the no-aggregation ablation).
pub fn concatenate_all(features: &[Vec<f64>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(features.iter().map(Vec::len).sum());
    for f in features {
        out.extend_from_slice(f);
    }
    out
}

// ── sparse (point, bone) pair machinery ──────────────────────────────────

/// Sparse layout of bone contributions per query point. Pairs are sorted
/// bone-major so each bone's rows form one contiguous block.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub n_points: usize,
    /// Bone index per pair (non-decreasing).
    pub bone_of: Vec<usize>,
    /// Active-point index per pair.
    pub point_of: Vec<usize>,
    /// Row range of each bone's pair block.
    pub bone_ranges: Vec<(usize, usize)>,
}

impl PairSet {
    /// Build from per-point in-bound bone lists (`bones[p]` sorted).
    pub fn from_point_bones(bones: &[Vec<usize>]) -> Self {
        let n_points = bones.len();
        let mut by_bone: Vec<Vec<usize>> = vec![Vec::new(); NUM_BONES];
        for (p, list) in bones.iter().enumerate() {
            for &b in list {
                by_bone[b].push(p);
            }
        }
        Self::from_bone_lists(&by_bone, n_points)
    }

    /// Build from per-bone point lists (already bone-major).
    pub fn from_bone_lists(bone_points: &[Vec<usize>], n_points: usize) -> Self {
        assert_eq!(bone_points.len(), NUM_BONES);
        let mut bone_of = Vec::new();
        let mut point_of = Vec::new();
        let mut bone_ranges = Vec::with_capacity(NUM_BONES);
        for (b, pts) in bone_points.iter().enumerate() {
            let start = bone_of.len();
            for &p in pts {
                bone_of.push(b);
                point_of.push(p);
            }
            bone_ranges.push((start, bone_of.len()));
        }
        PairSet {
            n_points,
            bone_of,
            point_of,
            bone_ranges,
        }
    }

    pub fn len(&self) -> usize {
        self.bone_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bone_of.is_empty()
    }

    pub fn point_index_rc(&self) -> Rc<Vec<usize>> {
        Rc::new(self.point_of.clone())
    }

    /// Sparse graph-mixing entries: for each output pair (pt, i), the input
    /// pairs (pt, j) of the same point weighted by the normalized adjacency
    /// (self-loops included). Absent neighbors contribute nothing, exactly
    /// like a dense evaluation over zero features.
    pub fn graph_entries(&self, norm_adj: &Tensor) -> Rc<Vec<(usize, usize, f64)>> {
        let mut pairs_of_point: Vec<Vec<(usize, usize)>> = vec![Vec::new(); self.n_points];
        for (idx, (&b, &p)) in self.bone_of.iter().zip(&self.point_of).enumerate() {
            pairs_of_point[p].push((b, idx));
        }
        let mut entries = Vec::new();
        for (out_idx, (&bi, &p)) in self.bone_of.iter().zip(&self.point_of).enumerate() {
            for &(bj, in_idx) in &pairs_of_point[p] {
                let w = norm_adj.get2(bi, bj);
                if w != 0.0 {
                    entries.push((out_idx, in_idx, w));
                }
            }
        }
        Rc::new(entries)
    }
}

/// Logit network A: optional graph layer, then per-bone 2-layer MLPs
/// producing one logit per (point, bone) pair.
#[derive(Debug, Clone)]
pub struct Aggregator {
    pub in_dim: usize,
    pub hidden: usize,
    pub graph_layer: bool,
    pub leaky: f64,
}

impl Aggregator {
    pub fn new(in_dim: usize, graph_layer: bool) -> Self {
        Aggregator {
            in_dim,
            hidden: 32,
            graph_layer,
            leaky: 0.01,
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) {
        if self.graph_layer {
            store.insert("agg.conv.w", init.linear_weight(self.in_dim, self.hidden));
            store.insert("agg.conv.b", Tensor::zeros(&[1, self.hidden]));
        }
        let l1_in = if self.graph_layer {
            self.hidden
        } else {
            self.in_dim
        };
        for i in 0..NUM_BONES {
            store.insert(
                &format!("agg.node{i}.l1.w"),
                init.linear_weight(l1_in, self.hidden),
            );
            store.insert(&format!("agg.node{i}.l1.b"), Tensor::zeros(&[1, self.hidden]));
            store.insert(
                &format!("agg.node{i}.l2.w"),
                init.linear_weight(self.hidden, 1),
            );
            store.insert(&format!("agg.node{i}.l2.b"), Tensor::zeros(&[1, 1]));
        }
    }

    /// `[P,1]` logits for a `[P, in_dim]` pair-feature matrix.
    pub fn logits_pairs<'t>(
        &self,
        tape: &'t Tape,
        params: &LiftedParams<'t>,
        pair_feats: Var<'t>,
        pairs: &PairSet,
        norm_adj: &Tensor,
    ) -> Result<Var<'t>> {
        if pairs.is_empty() {
            return Err(TensorError::Invalid {
                op: "logits_pairs",
                detail: "empty pair set".into(),
            });
        }
        let mixed = if self.graph_layer {
            let u = pair_feats.matmul(params.var("agg.conv.w"))?;
            let z = u.indexed_weighted_sum(pairs.graph_entries(norm_adj), pairs.len())?;
            z.add_row(params.var("agg.conv.b"))?.leaky_relu(self.leaky)
        } else {
            pair_feats
        };
        // per-bone MLP over that bone's contiguous pair block
        let mut blocks = Vec::new();
        for (b, &(start, end)) in pairs.bone_ranges.iter().enumerate() {
            if start == end {
                continue;
            }
            let x = mixed.slice_rows(start, end)?;
            let x = x
                .matmul(params.var(&format!("agg.node{b}.l1.w")))?
                .add_row(params.var(&format!("agg.node{b}.l1.b")))?
                .leaky_relu(self.leaky);
            let logit = x
                .matmul(params.var(&format!("agg.node{b}.l2.w")))?
                .add_row(params.var(&format!("agg.node{b}.l2.b")))?;
            blocks.push(logit);
        }
        concat_rows(tape, &blocks)
    }
}

/// Pair-level weights for a strategy.
///
/// For `softmax` the pair set must contain all 24 bones of every point (the
/// caller builds it that way); both softmax variants then share the same
/// normalized-exponential path. `concat` has no weights and is rejected.
pub fn pair_weights<'t>(
    tape: &'t Tape,
    strategy: AggregationStrategy,
    logits: Var<'t>,
    pairs: &PairSet,
) -> Result<Var<'t>> {
    match strategy {
        AggregationStrategy::Concat => Err(TensorError::Invalid {
            op: "pair_weights",
            detail: "concat strategy has no weights".into(),
        }),
        AggregationStrategy::SumOob => Ok(tape.constant(Tensor::filled(&[pairs.len(), 1], 1.0))),
        AggregationStrategy::SigmoidOob | AggregationStrategy::SoftSoftmax => {
            Ok(logits.sigmoid())
        }
        AggregationStrategy::Softmax | AggregationStrategy::SoftmaxOob => {
            let idx = pairs.point_index_rc();
            let e = logits.exp();
            let denom = e.scatter_add_rows(idx.clone(), pairs.n_points)?;
            let denom_at_pair = denom.gather_rows(idx)?;
            e.div(denom_at_pair)
        }
    }
}

/// Per-point sum of in-bound weights, `[n_points, 1]`.
pub fn weight_sums_per_point<'t>(weights: Var<'t>, pairs: &PairSet) -> Result<Var<'t>> {
    weights.scatter_add_rows(pairs.point_index_rc(), pairs.n_points)
}

/// Soft-softmax constraint on the tape: `sum_x (sum_i p_i - l_x)^2` with a
/// constant occupancy target per point.
pub fn soft_softmax_loss_var<'t>(
    tape: &'t Tape,
    weights: Var<'t>,
    pairs: &PairSet,
    target: &Tensor,
) -> Result<Var<'t>> {
    let sums = weight_sums_per_point(weights, pairs)?;
    let l = tape.constant(target.clone());
    let d = sums.sub(l)?;
    Ok(d.mul(d)?.sum_all())
}

/// Weighted per-point feature sum: `[P,D]` pair features with `[P,1]`
/// weights scattered into `[n_points, D]`.
pub fn aggregate_pairs<'t>(
    pair_feats: Var<'t>,
    weights: Var<'t>,
    pairs: &PairSet,
) -> Result<Var<'t>> {
    pair_feats
        .mul_col(weights)?
        .scatter_add_rows(pairs.point_index_rc(), pairs.n_points)
}
