//! Stage II feature retrieval from per-bone factorized volumes.
//!
//! A bone's volume stores one `[H, M]` feature array per axis plus three
//! learnable extents (half-widths, meters). A bone-local point is divided
//! by the extents; where the scaled coordinate leaves [-1, 1] the feature
//! is zero and out-of-bound, otherwise the three axis interpolations are
//! concatenated and attenuated by the boundary window
//! `w = exp(-alpha * (cx^beta + cy^beta + cz^beta))` with alpha = 2,
//! beta = 6 on the scaled coordinates. beta is even, so the implementation's
//! |c|^beta is identical to c^beta.
//!
//! A plain dense `[H, M^3]` trilinear grid variant exists for the
//! volume-type ablation.

use crate::kinematics::{BoneTransformSet, Vec3, NUM_BONES};
use crate::tape::{concat_cols, Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

pub const WINDOW_ALPHA: f64 = 2.0;
pub const WINDOW_BETA: i32 = 6;

/// Value-level factorized volume (tests, geometry tools). The training
/// pipeline keeps these on the tape instead; see `VolumeVars`.
#[derive(Debug, Clone)]
pub struct FactorizedVolume {
    /// x, y, z axis features, each `[H, M]`.
    pub axis_feats: [Tensor; 3],
    /// Positive half-extents (meters) per axis.
    pub extent: [f64; 3],
}

impl FactorizedVolume {
    pub fn zeros(h: usize, m: usize, extent: [f64; 3]) -> Self {
        FactorizedVolume {
            axis_feats: [Tensor::zeros(&[h, m]), Tensor::zeros(&[h, m]), Tensor::zeros(&[h, m])],
            extent,
        }
    }
}

/// Windowed per-bone feature for one query point.
#[derive(Debug, Clone)]
pub struct RetrievedFeature {
    /// `[hx, hy, hz]` concatenation scaled by the window; zeros when oob.
    pub feature: Vec<f64>,
    pub oob: bool,
    /// Window value in (0, 1].
    pub window: f64,
}

pub fn scaled_coord(local: Vec3, extent: [f64; 3]) -> [f64; 3] {
    [
        local[0] / extent[0],
        local[1] / extent[1],
        local[2] / extent[2],
    ]
}

pub fn is_oob(scaled: [f64; 3]) -> bool {
    scaled.iter().any(|c| !(-1.0..=1.0).contains(c))
}

/// Boundary window on scaled coordinates.
pub fn window(scaled: [f64; 3]) -> f64 {
    let s: f64 = scaled.iter().map(|c| c.abs().powi(WINDOW_BETA)).sum();
    (-WINDOW_ALPHA * s).exp()
}

/// Interpolate one axis array at a bone-local coordinate. The extent
/// rescales the coordinate into the [-1, 1] support; outside it the result
/// is the zero vector.
pub fn sample_axis(feats: &Tensor, extent: f64, coord: f64) -> Result<Vec<f64>> {
    if extent <= 0.0 {
        return Err(TensorError::Invalid {
            op: "sample_axis",
            detail: format!("extent {extent} must be positive"),
        });
    }
    let tape = Tape::new();
    let f = tape.constant(feats.clone());
    let c = tape.constant(Tensor::col(&[coord / extent]));
    Ok(Var::interp1d_from(f, c)?.to_tensor().into_data())
}

/// Trilinear sample of a dense `[H, M^3]` grid at a bone-local point;
/// zero outside the scaled unit cube.
pub fn sample_dense(grid: &Tensor, m: usize, extent: [f64; 3], local: Vec3) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let g = tape.constant(grid.clone());
    let sc = scaled_coord(local, extent);
    let c = tape.constant(Tensor::new(&[1, 3], sc.to_vec())?);
    Ok(Var::interp3d_from(g, c, m)?.to_tensor().into_data())
}

/// Windowed features of one world point against all 24 bone volumes.
pub fn retrieve(
    x: Vec3,
    volumes: &[FactorizedVolume],
    transforms: &BoneTransformSet,
) -> Result<Vec<RetrievedFeature>> {
    assert_eq!(volumes.len(), NUM_BONES);
    let h = volumes[0].axis_feats[0].rows();
    let mut out = Vec::with_capacity(NUM_BONES);
    for (i, vol) in volumes.iter().enumerate() {
        let local = transforms.world_to_bone[i].apply(x);
        let sc = scaled_coord(local, vol.extent);
        let w = window(sc);
        if is_oob(sc) {
            out.push(RetrievedFeature {
                feature: vec![0.0; 3 * h],
                oob: true,
                window: w,
            });
            continue;
        }
        let mut feature = Vec::with_capacity(3 * h);
        for a in 0..3 {
            feature.extend(sample_axis(&vol.axis_feats[a], vol.extent[a], local[a])?);
        }
        for v in feature.iter_mut() {
            *v *= w;
        }
        out.push(RetrievedFeature {
            feature,
            oob: false,
            window: w,
        });
    }
    Ok(out)
}

/// Learnable parameters of the factorized representation per bone.
pub fn factorized_param_count(h: usize, m: usize) -> usize {
    3 * h * m + 3
}

/// Learnable parameters of the dense-grid representation per bone.
pub fn dense_param_count(h: usize, m: usize) -> usize {
    h * m * m * m + 3
}

// ── batched tape pieces (training / rendering hot path) ─────────────────

/// `[k,3]` scaled coordinates from constant bone-local points and the
/// `[1,3]` extents variable; gradients flow into the extents.
pub fn scaled_coords_var<'t>(local: Var<'t>, extent: Var<'t>) -> Result<Var<'t>> {
    local.div_row(extent)
}

/// `[k,1]` boundary window over `[k,3]` scaled coordinates.
pub fn window_var<'t>(scaled: Var<'t>) -> Result<Var<'t>> {
    Ok(scaled
        .powi(WINDOW_BETA)
        .sum_axis1()?
        .scale(-WINDOW_ALPHA)
        .exp())
}

/// `[k, 3H]` concatenated axis interpolations at `[k,3]` scaled coordinates.
pub fn retrieve_axes_var<'t>(
    tape: &'t Tape,
    axis_feats: [Var<'t>; 3],
    scaled: Var<'t>,
) -> Result<Var<'t>> {
    let mut parts = Vec::with_capacity(3);
    for (a, feats) in axis_feats.into_iter().enumerate() {
        let c = scaled.slice_cols(a, a + 1)?;
        parts.push(Var::interp1d_from(feats, c)?);
    }
    concat_cols(tape, &parts)
}

/// Windowed `[k, 3H]` features: window(scaled) times the axis concatenation.
pub fn windowed_features_var<'t>(
    tape: &'t Tape,
    axis_feats: [Var<'t>; 3],
    scaled: Var<'t>,
) -> Result<Var<'t>> {
    let h = retrieve_axes_var(tape, axis_feats, scaled)?;
    let w = window_var(scaled)?;
    h.mul_col(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad_check::grad_check;
    use crate::kinematics::{forward_kinematics, matrix_to_rot6d, axis_angle_matrix, Pose, SkeletonRest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sample_axis_midpoint_of_two_samples() {
        // M=2: samples at -1 and 1; query at scaled coordinate 0
        let feats = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        let out = sample_axis(&feats, 1.0, 0.0).unwrap();
        assert_eq!(out, vec![0.5]);
    }

    #[test]
    fn sample_axis_outside_support_is_zero() {
        let feats = Tensor::new(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        // scaled coordinate 1.5
        let out = sample_axis(&feats, 1.0, 1.5).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
        let out = sample_axis(&feats, 2.0, 3.0).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn sample_axis_exact_at_grid_points() {
        let m = 5;
        let feats = Tensor::new(&[1, m], vec![0.3, -1.0, 2.0, 0.7, -0.2]).unwrap();
        for j in 0..m {
            let coord = -1.0 + 2.0 * j as f64 / (m - 1) as f64;
            let out = sample_axis(&feats, 1.0, coord).unwrap();
            assert!((out[0] - feats.data()[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_axis_matches_piecewise_linear_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let m = rng.gen_range(2..9);
            let h = rng.gen_range(1..4);
            let feats = Tensor::new(
                &[h, m],
                (0..h * m).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let c: f64 = rng.gen_range(-1.0..1.0);
            let out = sample_axis(&feats, 1.0, c).unwrap();
            // brute-force oracle: scan segments
            for ch in 0..h {
                let mut expect = 0.0;
                for j in 0..m - 1 {
                    let x0 = -1.0 + 2.0 * j as f64 / (m - 1) as f64;
                    let x1 = -1.0 + 2.0 * (j + 1) as f64 / (m - 1) as f64;
                    if c >= x0 && c <= x1 {
                        let t = (c - x0) / (x1 - x0);
                        expect = feats.get2(ch, j) * (1.0 - t) + feats.get2(ch, j + 1) * t;
                        break;
                    }
                }
                assert!(
                    (out[ch] - expect).abs() < 1e-9,
                    "channel {ch}: {} vs {expect}",
                    out[ch]
                );
            }
        }
    }

    #[test]
    fn window_analytic_constants() {
        assert_eq!(window([0.0, 0.0, 0.0]), 1.0);
        assert!((window([1.0, 0.0, 0.0]) - (-2.0f64).exp()).abs() < 1e-12);
        assert!((window([1.0, 1.0, 1.0]) - (-6.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn window_negative_coordinates_match_even_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let c: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let neg = [-c[0], -c[1], -c[2]];
            assert_eq!(window(c), window(neg));
        }
    }

    #[test]
    fn product_stays_small_across_boundary() {
        // the windowed feature magnitude near a boundary crossing stays
        // below exp(-2) * max|feature| + tolerance
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 3;
        let m = 6;
        let feats = Tensor::new(
            &[h, m],
            (0..h * m).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let max_feat = feats.data().iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        let eps = 1e-4;
        for side in [1.0 - eps, 1.0 + eps] {
            let sc = [side, 0.0, 0.0];
            let w = window(sc);
            let hx = sample_axis(&feats, 1.0, side).unwrap();
            let bound = (-2.0f64).exp() * max_feat + 1e-3;
            for v in hx {
                assert!(
                    (w * v).abs() <= bound,
                    "windowed magnitude {} above {bound}",
                    (w * v).abs()
                );
            }
        }
    }

    #[test]
    fn dense_constant_grid_and_grid_points() {
        let m = 4;
        let grid = Tensor::filled(&[2, m * m * m], 1.25);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let p: Vec3 = std::array::from_fn(|_| rng.gen_range(-0.99..0.99));
            let out = sample_dense(&grid, m, [1.0; 3], p).unwrap();
            assert!((out[0] - 1.25).abs() < 1e-12);
            assert!((out[1] - 1.25).abs() < 1e-12);
        }
        // exact at a grid point
        let mut g = Tensor::zeros(&[1, m * m * m]);
        let (xi, yi, zi) = (2, 1, 3);
        g.data_mut()[(xi * m + yi) * m + zi] = 7.5;
        let to_coord = |j: usize| -1.0 + 2.0 * j as f64 / (m - 1) as f64;
        let out = sample_dense(&g, m, [1.0; 3], [to_coord(xi), to_coord(yi), to_coord(zi)]).unwrap();
        assert!((out[0] - 7.5).abs() < 1e-12);
    }

    #[test]
    fn dense_matches_corner_blend_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = 5;
        let grid = Tensor::new(
            &[1, m * m * m],
            (0..m * m * m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        for _ in 0..100 {
            let p: Vec3 = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let out = sample_dense(&grid, m, [1.0; 3], p).unwrap()[0];
            // 8-corner weighted sum oracle
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
                        let wx = if dx == 1 { fx } else { 1.0 - fx };
                        let wy = if dy == 1 { fy } else { 1.0 - fy };
                        let wz = if dz == 1 { fz } else { 1.0 - fz };
                        expect += wx
                            * wy
                            * wz
                            * grid.data()[((jx + dx) * m + (jy + dy)) * m + (jz + dz)];
                    }
                }
            }
            assert!((out - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn retrieve_far_point_is_all_oob() {
        let rest = SkeletonRest::default_skeleton();
        let t = forward_kinematics(&Pose::rest(), &rest).unwrap();
        let volumes: Vec<FactorizedVolume> =
            (0..NUM_BONES).map(|_| FactorizedVolume::zeros(2, 4, [0.3; 3])).collect();
        let out = retrieve([50.0, 50.0, 50.0], &volumes, &t).unwrap();
        assert!(out.iter().all(|f| f.oob));
        assert!(out.iter().all(|f| f.feature.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn retrieve_point_inside_exactly_one_volume() {
        let rest = SkeletonRest::default_skeleton();
        let t = forward_kinematics(&Pose::rest(), &rest).unwrap();
        // tight volumes centered at each bone head; query right at the left
        // wrist head, nudged along its bone
        let volumes: Vec<FactorizedVolume> = (0..NUM_BONES)
            .map(|_| FactorizedVolume::zeros(2, 4, [0.05, 0.02, 0.02]))
            .collect();
        let wrist = 20;
        let head = t.head(wrist);
        let x = [head[0] + 0.02, head[1] + 0.005, head[2]];
        let out = retrieve(x, &volumes, &t).unwrap();
        let inside: Vec<usize> = out
            .iter()
            .enumerate()
            .filter_map(|(i, f)| (!f.oob).then_some(i))
            .collect();
        assert_eq!(inside, vec![wrist]);
    }

    #[test]
    fn retrieve_is_rigid_equivariant() {
        let rest = SkeletonRest::default_skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut volumes = Vec::with_capacity(NUM_BONES);
        for _ in 0..NUM_BONES {
            let mut v = FactorizedVolume::zeros(2, 4, [0.4, 0.25, 0.25]);
            for a in 0..3 {
                v.axis_feats[a] = Tensor::new(
                    &[2, 4],
                    (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap();
            }
            volumes.push(v);
        }
        let mut pose = Pose::rest();
        pose.rotations[16] = matrix_to_rot6d(&axis_angle_matrix([0.0, 0.0, 1.0], -0.7));
        let t0 = forward_kinematics(&pose, &rest).unwrap();

        // same pose rigidly moved: rotate the root and translate
        let g_rot = axis_angle_matrix([0.0, 1.0, 0.0], 1.1);
        let mut moved = pose.clone();
        moved.rotations[0] = matrix_to_rot6d(&g_rot);
        moved.root_translation = [0.4, -0.2, 0.9];
        let t1 = forward_kinematics(&moved, &rest).unwrap();
        let g = t1.bone_to_world[0].compose(&t0.bone_to_world[0].inverse());

        for _ in 0..30 {
            let x: Vec3 = std::array::from_fn(|i| rng.gen_range(-0.8..0.8) + if i == 1 { 1.0 } else { 0.0 });
            let f0 = retrieve(x, &volumes, &t0).unwrap();
            let f1 = retrieve(g.apply(x), &volumes, &t1).unwrap();
            for (a, b) in f0.iter().zip(&f1) {
                assert_eq!(a.oob, b.oob);
                for (u, v) in a.feature.iter().zip(&b.feature) {
                    assert!((u - v).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn param_count_claims() {
        assert_eq!(factorized_param_count(8, 16), 3 * 8 * 16 + 3);
        assert_eq!(dense_param_count(8, 16), 8 * 4096 + 3);
        for m in 2..64 {
            for h in 1..16 {
                assert!(
                    factorized_param_count(h, m) < dense_param_count(h, m),
                    "h={h} m={m}"
                );
            }
        }
    }

    #[test]
    fn retrieval_gradients_match_finite_differences() {
        // gradients through axis features and extents for in-bound points
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (h, m) = (2, 4);
        let feats: Vec<Tensor> = (0..3)
            .map(|_| {
                Tensor::new(&[h, m], (0..h * m).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .unwrap()
            })
            .collect();
        let logext = Tensor::new(&[1, 3], vec![0.2, -0.1, 0.05]).unwrap();
        let local = Tensor::new(
            &[5, 3],
            (0..15).map(|_| rng.gen_range(-0.6..0.6)).collect(),
        )
        .unwrap();

        let params = vec![
            ("vx".to_string(), feats[0].clone()),
            ("vy".to_string(), feats[1].clone()),
            ("vz".to_string(), feats[2].clone()),
            ("logext".to_string(), logext),
        ];
        let report = grad_check(&params, 1e-5, 1e-4, None, 0, |tape, vars| {
            let ext = vars[3].exp();
            let localv = tape.constant(local.clone());
            let scaled = scaled_coords_var(localv, ext)?;
            let hfeat = windowed_features_var(tape, [vars[0], vars[1], vars[2]], scaled)?;
            Ok(hfeat.mul(hfeat)?.sum_all())
        })
        .unwrap();
        assert!(
            report.pass(),
            "retrieval grad rel err {}",
            report.max_rel_err()
        );
    }
}
