//! Verification harness behind `self-test` and the acceptance suite:
//! finite-difference gradient checks for every tape operation, brute-force
//! oracle equivalence for the numerically load-bearing routines, and the
//! end-to-end micro-batch gradient check.
//!
//! Oracles here are deliberately independent re-derivations (explicit
//! loops, moment formulas, quaternion composition) and never call the
//! implementation they check.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{pair_weights, weights_softmax_oob, AggregationStrategy, PairSet};
use crate::config::Config;
use crate::grad_check::grad_check;
use crate::image_io::ImageBuf;
use crate::kinematics::{
    forward_kinematics, mat3_mul, mat3_vec, rot6d_to_matrix, Mat3, Pose, SkeletonRest, Vec3,
    NUM_BONES,
};
use crate::losses::total_loss;
use crate::model::Model;
use crate::renderer::{composite_var, gen_rays, ray_box_clip, Camera};
use crate::tape::{concat_cols, concat_rows, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_err: f64,
    pub tol: f64,
}

impl CheckResult {
    pub fn pass(&self) -> bool {
        self.max_err < self.tol
    }
}

pub const OP_GRAD_TOL: f64 = 1e-4;
pub const OP_GRAD_STEP: f64 = 1e-4;
pub const ORACLE_TOL: f64 = 1e-9;
pub const PIPELINE_GRAD_TOL: f64 = 1e-3;

// ── gradient checks ──────────────────────────────────────────────────────

struct OpSpec {
    name: &'static str,
    /// Parameter shapes; values drawn in [-2, 2] unless transformed below.
    shapes: Vec<Vec<usize>>,
    /// Per-parameter domain transform applied to the raw draw.
    domain: fn(usize, f64) -> f64,
    build: for<'a> fn(&'a Tape, &[Var<'a>]) -> crate::tensor::Result<Var<'a>>,
}

fn ident(_: usize, v: f64) -> f64 {
    v
}

/// Keep denominators and kinked functions away from zero, coordinates away
/// from interpolation knots; the finite-difference step never crosses a
/// non-smooth point.
fn away_from_zero(_: usize, v: f64) -> f64 {
    v.signum() * (v.abs() + 0.1)
}

fn positive(_: usize, v: f64) -> f64 {
    v.abs() + 0.1
}

fn op_specs() -> Vec<OpSpec> {
    let mut specs: Vec<OpSpec> = Vec::new();
    let m44: Vec<usize> = vec![4, 4];
    specs.push(OpSpec {
        name: "add",
        shapes: vec![m44.clone(), m44.clone()],
        domain: ident,
        build: |_, v| v[0].add(v[1]),
    });
    specs.push(OpSpec {
        name: "sub",
        shapes: vec![m44.clone(), m44.clone()],
        domain: ident,
        build: |_, v| v[0].sub(v[1]),
    });
    specs.push(OpSpec {
        name: "mul",
        shapes: vec![m44.clone(), m44.clone()],
        domain: ident,
        build: |_, v| v[0].mul(v[1]),
    });
    specs.push(OpSpec {
        name: "div",
        shapes: vec![m44.clone(), m44.clone()],
        domain: |p, v| if p == 1 { away_from_zero(p, v) } else { v },
        build: |_, v| v[0].div(v[1]),
    });
    specs.push(OpSpec {
        name: "matmul",
        shapes: vec![vec![3, 4], vec![4, 2]],
        domain: ident,
        build: |_, v| v[0].matmul(v[1]),
    });
    specs.push(OpSpec {
        name: "transpose",
        shapes: vec![vec![3, 5]],
        domain: ident,
        build: |_, v| v[0].transpose(),
    });
    specs.push(OpSpec {
        name: "reshape",
        shapes: vec![vec![3, 4]],
        domain: ident,
        build: |_, v| v[0].reshape(&[2, 6]),
    });
    specs.push(OpSpec {
        name: "add_row",
        shapes: vec![vec![5, 3], vec![1, 3]],
        domain: ident,
        build: |_, v| v[0].add_row(v[1]),
    });
    specs.push(OpSpec {
        name: "mul_col",
        shapes: vec![vec![5, 3], vec![5, 1]],
        domain: ident,
        build: |_, v| v[0].mul_col(v[1]),
    });
    specs.push(OpSpec {
        name: "div_row",
        shapes: vec![vec![5, 3], vec![1, 3]],
        domain: |p, v| if p == 1 { away_from_zero(p, v) } else { v },
        build: |_, v| v[0].div_row(v[1]),
    });
    specs.push(OpSpec {
        name: "mul_scalar",
        shapes: vec![vec![4, 3], vec![1, 1]],
        domain: ident,
        build: |_, v| v[0].mul_scalar(v[1]),
    });
    specs.push(OpSpec {
        name: "div_scalar",
        shapes: vec![vec![4, 3], vec![1, 1]],
        domain: |p, v| if p == 1 { away_from_zero(p, v) } else { v },
        build: |_, v| v[0].div_scalar(v[1]),
    });
    specs.push(OpSpec {
        name: "cross3",
        shapes: vec![vec![3, 1], vec![3, 1]],
        domain: ident,
        build: |_, v| v[0].cross3(v[1]),
    });
    specs.push(OpSpec {
        name: "scale/add_const/neg",
        shapes: vec![m44.clone()],
        domain: ident,
        build: |_, v| Ok(v[0].scale(1.7).add_const(-0.3).neg()),
    });
    specs.push(OpSpec {
        name: "exp",
        shapes: vec![m44.clone()],
        domain: ident,
        build: |_, v| Ok(v[0].exp()),
    });
    specs.push(OpSpec {
        name: "log",
        shapes: vec![m44.clone()],
        domain: positive,
        build: |_, v| Ok(v[0].ln()),
    });
    specs.push(OpSpec {
        name: "sqrt",
        shapes: vec![m44.clone()],
        domain: positive,
        build: |_, v| Ok(v[0].sqrt()),
    });
    specs.push(OpSpec {
        name: "sigmoid",
        shapes: vec![m44.clone()],
        domain: ident,
        build: |_, v| Ok(v[0].sigmoid()),
    });
    specs.push(OpSpec {
        name: "softplus",
        shapes: vec![m44.clone()],
        domain: ident,
        build: |_, v| Ok(v[0].softplus()),
    });
    specs.push(OpSpec {
        name: "abs",
        shapes: vec![m44.clone()],
        domain: away_from_zero,
        build: |_, v| Ok(v[0].abs()),
    });
    specs.push(OpSpec {
        name: "powi6",
        shapes: vec![m44.clone()],
        domain: ident,
        build: |_, v| Ok(v[0].powi(6)),
    });
    specs.push(OpSpec {
        name: "leaky_relu",
        shapes: vec![m44.clone()],
        domain: away_from_zero,
        build: |_, v| Ok(v[0].leaky_relu(0.01)),
    });
    specs.push(OpSpec {
        name: "relu",
        shapes: vec![m44.clone()],
        domain: away_from_zero,
        build: |_, v| Ok(v[0].relu()),
    });
    specs.push(OpSpec {
        name: "sum/mean",
        shapes: vec![m44.clone()],
        domain: ident,
        build: |_, v| v[0].mean_all().mul(v[0].sum_all()),
    });
    specs.push(OpSpec {
        name: "sum_axis1",
        shapes: vec![vec![4, 5]],
        domain: ident,
        build: |_, v| v[0].sum_axis1(),
    });
    specs.push(OpSpec {
        name: "softmax",
        shapes: vec![vec![3, 6]],
        domain: ident,
        build: |_, v| v[0].softmax_rows(),
    });
    specs.push(OpSpec {
        name: "slice",
        shapes: vec![vec![6, 4]],
        domain: ident,
        build: |t, v| {
            let rows = v[0].slice_rows(1, 4)?;
            let cols = v[0].slice_cols(1, 3)?;
            concat_cols(t, &[rows.sum_axis1()?, cols.slice_rows(0, 3)?])
        },
    });
    specs.push(OpSpec {
        name: "gather",
        shapes: vec![vec![5, 3]],
        domain: ident,
        build: |_, v| v[0].gather_rows(Rc::new(vec![4, 0, 2, 2, 1])),
    });
    specs.push(OpSpec {
        name: "scatter_add",
        shapes: vec![vec![6, 3]],
        domain: ident,
        build: |_, v| v[0].scatter_add_rows(Rc::new(vec![2, 0, 2, 1, 3, 0]), 4),
    });
    specs.push(OpSpec {
        name: "indexed_weighted_sum",
        shapes: vec![vec![5, 3]],
        domain: ident,
        build: |_, v| {
            v[0].indexed_weighted_sum(
                Rc::new(vec![
                    (0, 0, 0.5),
                    (0, 1, -0.7),
                    (1, 2, 1.3),
                    (2, 3, 0.9),
                    (2, 4, 0.4),
                    (2, 0, -1.1),
                ]),
                3,
            )
        },
    });
    specs.push(OpSpec {
        name: "segment_cumsum_exclusive",
        shapes: vec![vec![8, 1]],
        domain: ident,
        build: |_, v| v[0].segment_cumsum_exclusive(4),
    });
    specs.push(OpSpec {
        name: "segment_sum",
        shapes: vec![vec![8, 3]],
        domain: ident,
        build: |_, v| v[0].segment_sum(4),
    });
    specs.push(OpSpec {
        name: "concat",
        shapes: vec![vec![2, 3], vec![4, 3], vec![2, 3]],
        domain: ident,
        build: |t, v| {
            let rows = concat_rows(t, &[v[0], v[1]])?;
            concat_cols(t, &[v[2], v[0]])?.sum_all().mul(rows.sum_all())
        },
    });
    specs.push(OpSpec {
        name: "linear-interp-1d",
        shapes: vec![vec![3, 5], vec![6, 1]],
        // coordinates: squash into (-1,1) away from the 5 knots at
        // {-1,-0.5,0,0.5,1}; map the draw into knot-free open intervals
        domain: |p, v| {
            if p == 1 {
                let t = (v / 2.0 + 1.0) / 2.0; // (0,1)
                let cell = (t * 4.0).floor().min(3.0);
                let frac = 0.15 + 0.7 * (t * 4.0 - cell);
                -1.0 + (cell + frac) * 0.5
            } else {
                v
            }
        },
        build: |_, v| Var::interp1d_from(v[0], v[1]),
    });
    specs.push(OpSpec {
        name: "trilinear-interp-3d",
        shapes: vec![vec![2, 27], vec![4, 3]],
        domain: |p, v| {
            if p == 1 {
                let t = (v / 2.0 + 1.0) / 2.0;
                let cell = (t * 2.0).floor().min(1.0);
                let frac = 0.15 + 0.7 * (t * 2.0 - cell);
                -1.0 + (cell + frac)
            } else {
                v
            }
        },
        build: |_, v| Var::interp3d_from(v[0], v[1], 3),
    });
    specs.push(OpSpec {
        name: "window-function",
        shapes: vec![vec![5, 3]],
        domain: |_, v| v * 0.45, // scaled coordinates inside the support
        build: |_, v| crate::volume::window_var(v[0]),
    });
    specs.push(OpSpec {
        name: "rot6d-gram-schmidt",
        shapes: vec![vec![6, 1]],
        domain: away_from_zero,
        build: |t, v| crate::kinematics::rot6d_to_matrix_var(t, v[0]),
    });
    specs.push(OpSpec {
        name: "compositing",
        shapes: vec![vec![8, 1], vec![8, 3]],
        domain: |p, v| if p == 0 { v.abs() } else { v },
        build: |t, v| {
            let delta = t.constant(Tensor::filled(&[8, 1], 0.13));
            let (rgb, alpha, _) = composite_var(v[0], v[1], delta, 4)?;
            rgb.sum_all().add(alpha.sum_all())
        },
    });
    specs
}

/// Finite-difference check of one op over `instances` random draws.
fn check_op(spec: &OpSpec, seed: u64, instances: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0_f64;
    for _ in 0..instances {
        let params: Vec<(String, Tensor)> = spec
            .shapes
            .iter()
            .enumerate()
            .map(|(p, shape)| {
                let numel: usize = shape.iter().product();
                let data = (0..numel)
                    .map(|_| (spec.domain)(p, rng.gen_range(-2.0..2.0)))
                    .collect();
                (format!("p{p}"), Tensor::new(shape, data).unwrap())
            })
            .collect();
        let build = spec.build;
        let report = grad_check(&params, OP_GRAD_STEP, OP_GRAD_TOL, None, 0, move |t, vars| {
            let out = build(t, vars)?;
            // curved scalarization so linear-term sign errors cannot cancel
            out.mul(out)?.sum_all().add(out.sum_all())
        });
        match report {
            Ok(r) => max_err = max_err.max(r.max_rel_err()),
            Err(_) => max_err = f64::INFINITY,
        }
    }
    CheckResult {
        name: format!("grad/{}", spec.name),
        max_err,
        tol: OP_GRAD_TOL,
    }
}

/// Gradient checks for every registered op: 10 random inputs in [-2, 2],
/// central differences at step 1e-4, relative tolerance 1e-4.
pub fn gradient_checks(seed: u64) -> Vec<CheckResult> {
    op_specs()
        .iter()
        .enumerate()
        .map(|(i, spec)| check_op(spec, seed.wrapping_add(i as u64), 10))
        .collect()
}

/// A deliberately corrupted gradient (test fixture): exp with its backward
/// rule scaled by 2 percent. The checker must flag it.
pub fn corrupted_op_check(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::new(&[3, 3], (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let report = grad_check(
        &[("x".into(), x)],
        OP_GRAD_STEP,
        OP_GRAD_TOL,
        None,
        0,
        |tape, vars| {
            let v = vars[0];
            let value = v.to_tensor().map(f64::exp);
            let bad = tape.custom_op(value, &[v], |g, ctx| {
                vec![Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(ctx.out.data())
                        .map(|(g, y)| 1.02 * g * y)
                        .collect(),
                )
                .unwrap()]
            });
            Ok(bad.sum_all())
        },
    );
    CheckResult {
        name: "grad/corrupted-exp-fixture".into(),
        max_err: report.map(|r| r.max_rel_err()).unwrap_or(f64::INFINITY),
        tol: OP_GRAD_TOL,
    }
}

// ── oracle equivalence ───────────────────────────────────────────────────

pub fn oracle_checks(seed: u64) -> Vec<CheckResult> {
    vec![
        oracle_interp1d(seed),
        oracle_trilinear(seed.wrapping_add(1)),
        oracle_masked_softmax(seed.wrapping_add(2)),
        oracle_compositing(seed.wrapping_add(3)),
        oracle_fk_quaternion(seed.wrapping_add(4)),
        oracle_ssim(seed.wrapping_add(5)),
    ]
}

fn oracle_interp1d(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0_f64;
    for _ in 0..120 {
        let m = rng.gen_range(2..10);
        let h = rng.gen_range(1..4);
        let feats = Tensor::new(&[h, m], (0..h * m).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap();
        let c: f64 = rng.gen_range(-1.2..1.2);
        let tape = Tape::new();
        let out = Var::interp1d_from(
            tape.constant(feats.clone()),
            tape.constant(Tensor::col(&[c])),
        )
        .unwrap()
        .to_tensor();
        for ch in 0..h {
            // brute-force segment scan
            let mut expect = 0.0;
            if (-1.0..=1.0).contains(&c) {
                for j in 0..m - 1 {
                    let x0 = -1.0 + 2.0 * j as f64 / (m - 1) as f64;
                    let x1 = -1.0 + 2.0 * (j + 1) as f64 / (m - 1) as f64;
                    if c >= x0 && c <= x1 {
                        let t = (c - x0) / (x1 - x0);
                        expect = feats.get2(ch, j) * (1.0 - t) + feats.get2(ch, j + 1) * t;
                        break;
                    }
                }
            }
            max_err = max_err.max((out.data()[ch] - expect).abs());
        }
    }
    CheckResult {
        name: "oracle/axis-interpolation".into(),
        max_err,
        tol: ORACLE_TOL,
    }
}

fn oracle_trilinear(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = 5;
    let grid = Tensor::new(
        &[1, m * m * m],
        (0..m * m * m).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .unwrap();
    let mut max_err = 0.0_f64;
    for _ in 0..150 {
        let p: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let tape = Tape::new();
        let out = Var::interp3d_from(
            tape.constant(grid.clone()),
            tape.constant(Tensor::new(&[1, 3], p.to_vec()).unwrap()),
            m,
        )
        .unwrap()
        .item()
        .unwrap();
        let locate = |x: f64| {
            let u = (x + 1.0) * (m - 1) as f64 / 2.0;
            let j = (u.floor() as usize).min(m - 2);
            (j, u - j as f64)
        };
        let (jx, fx) = locate(p[0]);
        let (jy, fy) = locate(p[1]);
        let (jz, fz) = locate(p[2]);
        let mut expect = 0.0;
        for dx in 0..2 {
            for dy in 0..2 {
                for dz in 0..2 {
                    let w = (if dx == 1 { fx } else { 1.0 - fx })
                        * (if dy == 1 { fy } else { 1.0 - fy })
                        * (if dz == 1 { fz } else { 1.0 - fz });
                    expect += w * grid.data()[((jx + dx) * m + (jy + dy)) * m + (jz + dz)];
                }
            }
        }
        max_err = max_err.max((out - expect).abs());
    }
    CheckResult {
        name: "oracle/trilinear-sampling".into(),
        max_err,
        tol: ORACLE_TOL,
    }
}

fn oracle_masked_softmax(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0_f64;
    for _ in 0..120 {
        // random in-bound sets over a handful of points
        let n_points = rng.gen_range(1..5);
        let mut bones: Vec<Vec<usize>> = Vec::new();
        for _ in 0..n_points {
            let k = rng.gen_range(1..6);
            let mut set: Vec<usize> = (0..NUM_BONES).collect();
            for i in (1..NUM_BONES).rev() {
                set.swap(i, rng.gen_range(0..=i));
            }
            let mut chosen = set[..k].to_vec();
            chosen.sort_unstable();
            bones.push(chosen);
        }
        let pairs = PairSet::from_point_bones(&bones);
        let logits: Vec<f64> = (0..pairs.len()).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let tape = Tape::new();
        let lv = tape.constant(Tensor::new(&[pairs.len(), 1], logits.clone()).unwrap());
        let w = pair_weights(&tape, AggregationStrategy::SoftmaxOob, lv, &pairs)
            .unwrap()
            .to_tensor();
        for p in 0..n_points {
            let mut a = [0.0; NUM_BONES];
            let mut oob = [true; NUM_BONES];
            for (idx, (&b, &pt)) in pairs.bone_of.iter().zip(&pairs.point_of).enumerate() {
                if pt == p {
                    a[b] = logits[idx];
                    oob[b] = false;
                }
            }
            let expect = weights_softmax_oob(&a, &oob);
            for (idx, (&b, &pt)) in pairs.bone_of.iter().zip(&pairs.point_of).enumerate() {
                if pt == p {
                    max_err = max_err.max((w.data()[idx] - expect[b]).abs());
                }
            }
        }
    }
    CheckResult {
        name: "oracle/masked-softmax".into(),
        max_err,
        tol: ORACLE_TOL,
    }
}

fn oracle_compositing(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0_f64;
    for _ in 0..120 {
        let q = rng.gen_range(1..10);
        let rays = rng.gen_range(1..4);
        let n = rays * q;
        let sig: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
        let col: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let del: Vec<f64> = (0..n).map(|_| rng.gen_range(0.005..0.4)).collect();
        let tape = Tape::new();
        let (rgb, alpha, _) = composite_var(
            tape.constant(Tensor::new(&[n, 1], sig.clone()).unwrap()),
            tape.constant(Tensor::new(&[n, 3], col.clone()).unwrap()),
            tape.constant(Tensor::new(&[n, 1], del.clone()).unwrap()),
            q,
        )
        .unwrap();
        let rgb = rgb.to_tensor();
        let alpha = alpha.to_tensor();
        for r in 0..rays {
            // sequential T update oracle
            let mut t = 1.0;
            let mut orgb = [0.0; 3];
            let mut oalpha = 0.0;
            for s in 0..q {
                let i = r * q + s;
                let absorb = 1.0 - (-sig[i] * del[i]).exp();
                for k in 0..3 {
                    orgb[k] += t * absorb * col[i * 3 + k];
                }
                oalpha += t * absorb;
                t *= (-sig[i] * del[i]).exp();
            }
            for k in 0..3 {
                max_err = max_err.max((rgb.get2(r, k) - orgb[k]).abs());
            }
            max_err = max_err.max((alpha.get2(r, 0) - oalpha).abs());
        }
    }
    CheckResult {
        name: "oracle/compositing".into(),
        max_err,
        tol: ORACLE_TOL,
    }
}

// quaternion helpers for the FK oracle (w, x, y, z)
type Quat = [f64; 4];

fn quat_mul(a: Quat, b: Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

fn quat_from_matrix(m: &Mat3) -> Quat {
    // Shepperd's method
    let tr = m[0][0] + m[1][1] + m[2][2];
    let q: Quat = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[2][1] - m[1][2]) / s,
            (m[0][2] - m[2][0]) / s,
            (m[1][0] - m[0][1]) / s,
        ]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [
            (m[2][1] - m[1][2]) / s,
            0.25 * s,
            (m[0][1] + m[1][0]) / s,
            (m[0][2] + m[2][0]) / s,
        ]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [
            (m[0][2] - m[2][0]) / s,
            (m[0][1] + m[1][0]) / s,
            0.25 * s,
            (m[1][2] + m[2][1]) / s,
        ]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [
            (m[1][0] - m[0][1]) / s,
            (m[0][2] + m[2][0]) / s,
            (m[1][2] + m[2][1]) / s,
            0.25 * s,
        ]
    };
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

fn quat_rotate(q: Quat, v: Vec3) -> Vec3 {
    // v + 2 u x (u x v + w v) with u the vector part
    let u = [q[1], q[2], q[3]];
    let cross = |a: Vec3, b: Vec3| -> Vec3 {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    };
    let t = cross(u, [v[0] + 0.0, v[1], v[2]]);
    let t = [t[0] + q[0] * v[0], t[1] + q[0] * v[1], t[2] + q[0] * v[2]];
    let c = cross(u, t);
    [v[0] + 2.0 * c[0], v[1] + 2.0 * c[1], v[2] + 2.0 * c[2]]
}

fn oracle_fk_quaternion(seed: u64) -> CheckResult {
    let rest = SkeletonRest::default_skeleton();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0_f64;
    for _ in 0..100 {
        let mut pose = Pose::rest();
        for r in pose.rotations.iter_mut() {
            loop {
                let w: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-1.5..1.5));
                if rot6d_to_matrix(&w).is_ok() {
                    *r = w;
                    break;
                }
            }
        }
        pose.root_translation = std::array::from_fn(|_| rng.gen_range(-0.5..0.5));
        let fk = forward_kinematics(&pose, &rest).unwrap();

        // independent composition through quaternions
        let mut qs: Vec<Quat> = Vec::with_capacity(NUM_BONES);
        let mut ts: Vec<Vec3> = Vec::with_capacity(NUM_BONES);
        for i in 0..NUM_BONES {
            let r_local = rot6d_to_matrix(&pose.rotations[i]).unwrap();
            let q_local = quat_from_matrix(&r_local);
            if i == 0 {
                qs.push(q_local);
                ts.push([
                    rest.offset[0][0] + pose.root_translation[0],
                    rest.offset[0][1] + pose.root_translation[1],
                    rest.offset[0][2] + pose.root_translation[2],
                ]);
            } else {
                let p = rest.parent[i] as usize;
                qs.push(quat_mul(qs[p], q_local));
                let off = quat_rotate(qs[p], rest.offset[i]);
                ts.push([ts[p][0] + off[0], ts[p][1] + off[1], ts[p][2] + off[2]]);
            }
        }
        for i in 0..NUM_BONES {
            let q_bone = quat_mul(qs[i], quat_from_matrix(&rest.bone_frame[i]));
            // compare rotations by action on basis vectors
            for basis in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] {
                let a = quat_rotate(q_bone, basis);
                let b = mat3_vec(&fk.bone_to_world[i].r, basis);
                for k in 0..3 {
                    max_err = max_err.max((a[k] - b[k]).abs());
                }
            }
            for k in 0..3 {
                max_err = max_err.max((ts[i][k] - fk.bone_to_world[i].t[k]).abs());
            }
        }
        // also check world_to_bone is the exact inverse
        let m = mat3_mul(&fk.world_to_bone[5].r, &fk.bone_to_world[5].r);
        for (i, row) in m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                max_err = max_err.max((v - target).abs());
            }
        }
    }
    CheckResult {
        name: "oracle/forward-kinematics-quaternion".into(),
        max_err,
        tol: ORACLE_TOL,
    }
}

fn oracle_ssim(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0_f64;
    for _ in 0..100 {
        let (w, h) = (rng.gen_range(12..18), rng.gen_range(12..18));
        let mut a = ImageBuf::new(w, h);
        let mut b = ImageBuf::new(w, h);
        for v in a.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        for (i, v) in b.data.iter_mut().enumerate() {
            // correlated noise so covariances are non-trivial
            *v = (a.data[i] * 0.7 + rng.gen_range(0.0..0.3)).clamp(0.0, 1.0);
        }
        let got = crate::metrics::ssim(&a, &b);
        let expect = ssim_moment_oracle(&a, &b);
        max_err = max_err.max((got - expect).abs());
    }
    CheckResult {
        name: "oracle/ssim".into(),
        max_err,
        tol: ORACLE_TOL,
    }
}

/// Independent SSIM: raw-moment accumulation (E[x^2] - E[x]^2 form) with
/// the same 11x11 Gaussian window definition.
fn ssim_moment_oracle(pred: &ImageBuf, target: &ImageBuf) -> f64 {
    let (w, h) = (pred.width, pred.height);
    assert!(w >= 11 && h >= 11);
    let sigma = 1.5;
    let mut kern = [0.0f64; 11];
    let mut ksum = 0.0;
    for (i, v) in kern.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
        ksum += *v;
    }
    for v in kern.iter_mut() {
        *v /= ksum;
    }
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let mut total = 0.0;
    for ch in 0..3 {
        let mut acc = 0.0;
        let mut count = 0;
        for cy in 5..h - 5 {
            for cx in 5..w - 5 {
                let (mut ex, mut ey, mut exx, mut eyy, mut exy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let wgt = kern[dy] * kern[dx];
                        let x = pred.data[((cy + dy - 5) * w + cx + dx - 5) * 3 + ch];
                        let y = target.data[((cy + dy - 5) * w + cx + dx - 5) * 3 + ch];
                        ex += wgt * x;
                        ey += wgt * y;
                        exx += wgt * x * x;
                        eyy += wgt * y * y;
                        exy += wgt * x * y;
                    }
                }
                let vx = exx - ex * ex;
                let vy = eyy - ey * ey;
                let cov = exy - ex * ey;
                acc += ((2.0 * ex * ey + c1) * (2.0 * cov + c2))
                    / ((ex * ex + ey * ey + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / 3.0
}

// ── end-to-end micro-batch gradient ──────────────────────────────────────

/// Finite-difference check of the complete training objective on a 4-ray
/// micro-batch at desk scale.
pub fn pipeline_gradient_check(seed: u64) -> CheckResult {
    let cfg = Config {
        h: 2,
        m: 4,
        gnn_hidden: 6,
        field_width: 8,
        q: 4,
        rays_per_step: 4,
        ..Config::default()
    };
    let rest = SkeletonRest::default_skeleton();
    let model = Model::new(cfg.clone(), rest).expect("model");
    let store = model.init_params(seed);
    let pose = Pose::rest();
    let camera = Camera::look_at(
        [0.3, 1.0, -2.4],
        [0.0, 0.9, 0.0],
        [0.0, 1.0, 0.0],
        40.0,
        32,
        32,
    );
    let pixels = [(15u32, 12u32), (16, 15), (14, 18), (17, 21)];
    let mut rays = gen_rays(&camera, &pixels).expect("rays");
    let (lo, hi) = model.scene_bounds(&pose).expect("bounds");
    for i in 0..rays.len() {
        let (t0, t1) = ray_box_clip(rays.origins[i], rays.dirs[i], lo, hi).expect("hit");
        rays.near[i] = t0.max(1e-4);
        rays.far[i] = t1;
    }
    let batch = model.sample_rays(&rays, Some(7));
    let gt = Tensor::new(
        &[4, 3],
        vec![0.8, 0.2, 0.1, 0.3, 0.9, 0.5, 0.1, 0.4, 0.7, 0.6, 0.6, 0.2],
    )
    .unwrap();

    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let tensors: Vec<(String, Tensor)> = store
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let model_ref = &model;
    let report = grad_check(
        &tensors,
        OP_GRAD_STEP,
        PIPELINE_GRAD_TOL,
        Some(3),
        seed,
        move |tape, vars| {
            let lifted = crate::params::LiftedParams::from_pairs(
                names.iter().cloned().zip(vars.iter().copied()),
            );
            let out = model_ref
                .forward_samples(tape, &lifted, &pose, &batch)
                .map_err(|e| crate::tensor::TensorError::Invalid {
                    op: "pipeline",
                    detail: e.to_string(),
                })?;
            let lp = crate::losses::photometric_loss(out.rgb, &gt)?;
            total_loss(lp, out.volume_loss, out.ls, cfg.lambda_v, cfg.lambda_s)
        },
    );
    CheckResult {
        name: "grad/end-to-end-micro-batch".into(),
        max_err: report.map(|r| r.max_rel_err()).unwrap_or(f64::INFINITY),
        tol: PIPELINE_GRAD_TOL,
    }
}

/// The full self-test: op gradients, oracle equivalences, and the pipeline
/// gradient. Returns the results and the overall verdict.
pub fn run_all(seed: u64, inject_fault: bool) -> (Vec<CheckResult>, bool) {
    let mut results = gradient_checks(seed);
    results.extend(oracle_checks(seed.wrapping_add(1000)));
    results.push(pipeline_gradient_check(seed.wrapping_add(2000)));
    if inject_fault {
        results.push(corrupted_op_check(seed));
    }
    let pass = results.iter().all(|r| r.pass());
    (results, pass)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_op_gradients_pass() {
        for r in gradient_checks(99) {
            assert!(r.pass(), "{} max err {}", r.name, r.max_err);
        }
    }

    #[test]
    fn all_oracles_pass() {
        for r in oracle_checks(7) {
            assert!(r.pass(), "{} max err {}", r.name, r.max_err);
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let r = corrupted_op_check(3);
        assert!(!r.pass(), "fixture must fail: err {}", r.max_err);
    }

    #[test]
    fn pipeline_micro_batch_gradient_passes() {
        let r = pipeline_gradient_check(12);
        assert!(r.pass(), "end-to-end rel err {}", r.max_err);
    }
}
