//! Skeleton kinematics: the continuous 6D rotation parameterization,
//! forward kinematics over the 24-bone tree, and world-to-bone transforms.
//!
//! Bone frame convention: the local x-axis points along the bone toward its
//! canonical child (the lowest-index child; leaves extend their own incoming
//! direction), with the origin at the bone head. The root's translation is
//! part of its chain, so every world-to-bone transform absorbs it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::{concat_cols, Tape, Var};
use crate::tensor::Tensor;

pub const NUM_BONES: usize = 24;

/// Fraction of the incoming offset used as the synthetic bone length of a
/// leaf (a leaf has no child to point at).
const LEAF_LENGTH_FRACTION: f64 = 0.8;

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("degenerate 6D rotation for bone {bone}: {reason}")]
    DegenerateRotation { bone: usize, reason: String },
    #[error("bone index {index} out of range (0..{NUM_BONES})")]
    BoneIndexOutOfRange { index: usize },
    #[error("skeleton file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid skeleton: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

/// Per-frame body pose: one 6D rotation per bone plus the root translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// 24 six-component rotation vectors (two 3-vectors, orthonormalized by
    /// Gram-Schmidt into a rotation matrix).
    pub rotations: Vec<[f64; 6]>,
    /// Root translation in meters.
    pub root_translation: Vec3,
}

impl Pose {
    pub fn rest() -> Self {
        Pose {
            rotations: vec![IDENTITY_6D; NUM_BONES],
            root_translation: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        if self.rotations.len() != NUM_BONES {
            return Err(KinematicsError::Invalid(format!(
                "pose has {} rotations, expected {NUM_BONES}",
                self.rotations.len()
            )));
        }
        Ok(())
    }
}

pub const IDENTITY_6D: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Rest skeleton: tree structure, rest offsets, and the bone graph.
#[derive(Debug, Clone)]
pub struct SkeletonRest {
    /// Parent index per bone; the root stores -1.
    pub parent: [i32; NUM_BONES],
    /// Bone-head offset in the parent frame (root: rest world position).
    pub offset: [Vec3; NUM_BONES],
    adjacency: [[bool; NUM_BONES]; NUM_BONES],
    /// Rest rotation aligning bone-local axes inside joint frame i.
    pub bone_frame: [Mat3; NUM_BONES],
    /// Distance from bone head to its canonical child (leaves: synthetic).
    pub bone_length: [f64; NUM_BONES],
    /// Unit direction toward the canonical child, in joint-frame coordinates.
    pub bone_dir: [Vec3; NUM_BONES],
}

impl SkeletonRest {
    /// The skeleton shipped with the crate (`data/rest_skeleton.txt`).
    pub fn default_skeleton() -> Self {
        Self::parse(include_str!("../data/rest_skeleton.txt"))
            .expect("embedded rest skeleton must parse")
    }

    pub fn load(path: &std::path::Path) -> Result<Self, KinematicsError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| KinematicsError::Invalid(format!("read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parse the line-oriented skeleton format: bone lines
    /// (`index parent ox oy oz`), then an `edges` marker, then adjacency
    /// pairs (`i j`).
    pub fn parse(text: &str) -> Result<Self, KinematicsError> {
        let mut parent = [-1i32; NUM_BONES];
        let mut offset = [[0.0; 3]; NUM_BONES];
        let mut seen = [false; NUM_BONES];
        let mut adjacency = [[false; NUM_BONES]; NUM_BONES];
        let mut in_edges = false;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line == "edges" {
                in_edges = true;
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parse_idx = |s: &str| -> Result<usize, KinematicsError> {
                let i: usize = s.parse().map_err(|_| KinematicsError::Parse {
                    line: ln + 1,
                    msg: format!("bad index `{s}`"),
                })?;
                if i >= NUM_BONES {
                    return Err(KinematicsError::Parse {
                        line: ln + 1,
                        msg: format!("index {i} out of range"),
                    });
                }
                Ok(i)
            };
            if in_edges {
                if fields.len() != 2 {
                    return Err(KinematicsError::Parse {
                        line: ln + 1,
                        msg: "edge line needs two indices".into(),
                    });
                }
                let (i, j) = (parse_idx(fields[0])?, parse_idx(fields[1])?);
                if i == j {
                    return Err(KinematicsError::Parse {
                        line: ln + 1,
                        msg: "self edge".into(),
                    });
                }
                adjacency[i][j] = true;
                adjacency[j][i] = true;
            } else {
                if fields.len() != 5 {
                    return Err(KinematicsError::Parse {
                        line: ln + 1,
                        msg: "bone line needs index parent ox oy oz".into(),
                    });
                }
                let i = parse_idx(fields[0])?;
                let p: i32 = fields[1].parse().map_err(|_| KinematicsError::Parse {
                    line: ln + 1,
                    msg: format!("bad parent `{}`", fields[1]),
                })?;
                for (k, f) in fields[2..5].iter().enumerate() {
                    offset[i][k] = f.parse().map_err(|_| KinematicsError::Parse {
                        line: ln + 1,
                        msg: format!("bad offset `{f}`"),
                    })?;
                }
                parent[i] = p;
                seen[i] = true;
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(KinematicsError::Invalid("missing bone lines".into()));
        }
        Self::build(parent, offset, adjacency)
    }

    fn build(
        parent: [i32; NUM_BONES],
        offset: [Vec3; NUM_BONES],
        adjacency: [[bool; NUM_BONES]; NUM_BONES],
    ) -> Result<Self, KinematicsError> {
        if parent[0] != -1 {
            return Err(KinematicsError::Invalid("bone 0 must be the root".into()));
        }
        for (i, &p) in parent.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= i {
                return Err(KinematicsError::Invalid(format!(
                    "bone {i} parent {p} must precede it"
                )));
            }
        }
        for i in 0..NUM_BONES {
            if adjacency[i][i] {
                return Err(KinematicsError::Invalid(format!("self edge at {i}")));
            }
        }

        let canonical_child: Vec<Option<usize>> = (0..NUM_BONES)
            .map(|i| (0..NUM_BONES).find(|&c| parent[c] == i as i32))
            .collect();

        let mut bone_frame = [[[0.0; 3]; 3]; NUM_BONES];
        let mut bone_length = [0.0; NUM_BONES];
        let mut bone_dir = [[0.0; 3]; NUM_BONES];
        for i in 0..NUM_BONES {
            let (dir, len) = match canonical_child[i] {
                Some(c) => {
                    let o = offset[c];
                    (o, norm(o))
                }
                None => {
                    let o = offset[i];
                    (o, norm(o) * LEAF_LENGTH_FRACTION)
                }
            };
            if len < 1e-9 {
                return Err(KinematicsError::Invalid(format!(
                    "bone {i} has zero length"
                )));
            }
            let x = scale3(dir, 1.0 / norm(dir));
            bone_frame[i] = frame_from_x(x);
            bone_length[i] = len;
            bone_dir[i] = x;
        }

        Ok(SkeletonRest {
            parent,
            offset,
            adjacency,
            bone_frame,
            bone_length,
            bone_dir,
        })
    }

    pub fn adjacency(&self) -> &[[bool; NUM_BONES]; NUM_BONES] {
        &self.adjacency
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency[i]
            .iter()
            .enumerate()
            .filter_map(|(j, &a)| a.then_some(j))
    }

    /// Hop count between bones over the adjacency graph (BFS).
    pub fn graph_distance(&self, from: usize, to: usize) -> usize {
        let mut dist = [usize::MAX; NUM_BONES];
        let mut queue = std::collections::VecDeque::new();
        dist[from] = 0;
        queue.push_back(from);
        while let Some(u) = queue.pop_front() {
            if u == to {
                return dist[u];
            }
            for v in self.neighbors(u) {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist[to]
    }

    /// Serialize back to the line-oriented format.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# rest skeleton\n");
        for i in 0..NUM_BONES {
            s.push_str(&format!(
                "{} {} {} {} {}\n",
                i, self.parent[i], self.offset[i][0], self.offset[i][1], self.offset[i][2]
            ));
        }
        s.push_str("edges\n");
        for i in 0..NUM_BONES {
            for j in i + 1..NUM_BONES {
                if self.adjacency[i][j] {
                    s.push_str(&format!("{i} {j}\n"));
                }
            }
        }
        s
    }
}

/// A rotation plus translation; applies as `R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub r: Mat3,
    pub t: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            r: MAT3_IDENTITY,
            t: [0.0; 3],
        }
    }

    pub fn apply(&self, x: Vec3) -> Vec3 {
        add3(mat3_vec(&self.r, x), self.t)
    }

    pub fn inverse(&self) -> Self {
        let rt = mat3_transpose(&self.r);
        RigidTransform {
            r: rt,
            t: scale3(mat3_vec(&rt, self.t), -1.0),
        }
    }

    pub fn compose(&self, inner: &RigidTransform) -> Self {
        RigidTransform {
            r: mat3_mul(&self.r, &inner.r),
            t: add3(mat3_vec(&self.r, inner.t), self.t),
        }
    }
}

/// World-to-bone transforms for every bone of a posed skeleton, with the
/// bone-to-world transforms kept alongside.
#[derive(Debug, Clone)]
pub struct BoneTransformSet {
    pub world_to_bone: Vec<RigidTransform>,
    pub bone_to_world: Vec<RigidTransform>,
}

impl BoneTransformSet {
    /// Posed bone head position in world space.
    pub fn head(&self, i: usize) -> Vec3 {
        self.bone_to_world[i].t
    }

    /// Posed bone tail (head moved along the bone axis by its length).
    pub fn tail(&self, i: usize, rest: &SkeletonRest) -> Vec3 {
        let b = &self.bone_to_world[i];
        b.apply([rest.bone_length[i], 0.0, 0.0])
    }
}

/// Map a 6D rotation vector to a rotation matrix by Gram-Schmidt.
///
/// Invariant to positive rescaling of either column. Fails on a near-zero
/// first column or near-parallel columns.
pub fn rot6d_to_matrix(w: &[f64; 6]) -> Result<Mat3, KinematicsError> {
    rot6d_to_matrix_for_bone(w, 0)
}

pub fn rot6d_to_matrix_for_bone(w: &[f64; 6], bone: usize) -> Result<Mat3, KinematicsError> {
    let a = [w[0], w[1], w[2]];
    let b = [w[3], w[4], w[5]];
    let na = norm(a);
    if na < 1e-9 {
        return Err(KinematicsError::DegenerateRotation {
            bone,
            reason: "first column is (near) zero".into(),
        });
    }
    let x = scale3(a, 1.0 / na);
    let u = sub3(b, scale3(x, dot3(x, b)));
    let nu = norm(u);
    if nu < 1e-9 {
        return Err(KinematicsError::DegenerateRotation {
            bone,
            reason: "columns are (near) parallel".into(),
        });
    }
    let y = scale3(u, 1.0 / nu);
    let z = cross3(x, y);
    Ok(cols_to_mat(x, y, z))
}

/// Tape version of `rot6d_to_matrix`: input `[6,1]`, output `[3,3]`,
/// differentiable through the Gram-Schmidt steps.
pub fn rot6d_to_matrix_var<'t>(
    tape: &'t Tape,
    w: Var<'t>,
) -> Result<Var<'t>, crate::tensor::TensorError> {
    let a = w.slice_rows(0, 3)?;
    let b = w.slice_rows(3, 6)?;
    let na = a.mul(a)?.sum_all().sqrt();
    let x = a.div_scalar(na)?;
    let xb = x.mul(b)?.sum_all();
    let u = b.sub(x.mul_scalar(xb)?)?;
    let nu = u.mul(u)?.sum_all().sqrt();
    let y = u.div_scalar(nu)?;
    let z = x.cross3(y)?;
    concat_cols(tape, &[x, y, z])
}

/// Forward kinematics: compose parent chains into per-bone world transforms
/// and invert them into world-to-bone maps.
pub fn forward_kinematics(
    pose: &Pose,
    rest: &SkeletonRest,
) -> Result<BoneTransformSet, KinematicsError> {
    pose.validate()?;
    let mut joint_world: Vec<RigidTransform> = Vec::with_capacity(NUM_BONES);
    for i in 0..NUM_BONES {
        let r_local = rot6d_to_matrix_for_bone(&pose.rotations[i], i)?;
        let local = RigidTransform {
            r: r_local,
            t: if i == 0 {
                add3(rest.offset[0], pose.root_translation)
            } else {
                rest.offset[i]
            },
        };
        let world = if i == 0 {
            local
        } else {
            joint_world[rest.parent[i] as usize].compose(&local)
        };
        joint_world.push(world);
    }
    let mut bone_to_world = Vec::with_capacity(NUM_BONES);
    let mut world_to_bone = Vec::with_capacity(NUM_BONES);
    for i in 0..NUM_BONES {
        let b2w = RigidTransform {
            r: mat3_mul(&joint_world[i].r, &rest.bone_frame[i]),
            t: joint_world[i].t,
        };
        world_to_bone.push(b2w.inverse());
        bone_to_world.push(b2w);
    }
    Ok(BoneTransformSet {
        world_to_bone,
        bone_to_world,
    })
}

/// World point expressed in bone i's local frame.
pub fn to_bone_coords(
    x: Vec3,
    transforms: &BoneTransformSet,
    i: usize,
) -> Result<Vec3, KinematicsError> {
    if i >= NUM_BONES {
        return Err(KinematicsError::BoneIndexOutOfRange { index: i });
    }
    Ok(transforms.world_to_bone[i].apply(x))
}

/// Axis-aligned bounding box of all posed bone heads and tails.
pub fn pose_bounds(transforms: &BoneTransformSet, rest: &SkeletonRest) -> (Vec3, Vec3) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for i in 0..NUM_BONES {
        for p in [transforms.head(i), transforms.tail(i, rest)] {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
    }
    (lo, hi)
}

// ── plain 3-vector / 3x3 helpers ─────────────────────────────────────────

pub const MAT3_IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale3(a: Vec3, c: f64) -> Vec3 {
    [a[0] * c, a[1] * c, a[2] * c]
}

pub fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn normalize3(a: Vec3) -> Vec3 {
    scale3(a, 1.0 / norm(a))
}

pub fn mat3_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat3_transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = m[j][i];
        }
    }
    out
}

fn cols_to_mat(x: Vec3, y: Vec3, z: Vec3) -> Mat3 {
    [
        [x[0], y[0], z[0]],
        [x[1], y[1], z[1]],
        [x[2], y[2], z[2]],
    ]
}

/// Right-handed orthonormal frame with the given x-axis (columns x,y,z).
fn frame_from_x(x: Vec3) -> Mat3 {
    let reference = if x[1].abs() < 0.95 {
        [0.0, 1.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let z = normalize3(cross3(x, reference));
    let y = cross3(z, x);
    cols_to_mat(x, y, z)
}

/// Convert a rotation matrix to the 6D representation (its first two columns).
pub fn matrix_to_rot6d(m: &Mat3) -> [f64; 6] {
    [m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]]
}

/// Axis-angle to rotation matrix (Rodrigues); handy for pose sampling.
pub fn axis_angle_matrix(axis: Vec3, angle: f64) -> Mat3 {
    let a = normalize3(axis);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [
            c + a[0] * a[0] * t,
            a[0] * a[1] * t - a[2] * s,
            a[0] * a[2] * t + a[1] * s,
        ],
        [
            a[1] * a[0] * t + a[2] * s,
            c + a[1] * a[1] * t,
            a[1] * a[2] * t - a[0] * s,
        ],
        [
            a[2] * a[0] * t - a[1] * s,
            a[2] * a[1] * t + a[0] * s,
            c + a[2] * a[2] * t,
        ],
    ]
}

/// Check a matrix for orthonormality with positive determinant.
pub fn rotation_defect(m: &Mat3) -> f64 {
    let mt = mat3_transpose(m);
    let mtm = mat3_mul(&mt, m);
    let mut defect = 0.0_f64;
    for (i, row) in mtm.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            defect = defect.max((v - target).abs());
        }
    }
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    defect.max((det - 1.0).abs())
}

/// Tensor view of a world-to-bone rotation (rows of `r`), for tape use.
pub fn rotation_tensor(t: &RigidTransform) -> Tensor {
    let mut data = Vec::with_capacity(9);
    for row in &t.r {
        data.extend_from_slice(row);
    }
    Tensor::new(&[3, 3], data).unwrap()
}
