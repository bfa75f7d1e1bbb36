//! Pinhole cameras, ray generation, stratified depth sampling, and the
//! emission-absorption compositing of the volume renderer.
//!
//! Camera convention: world-to-camera rigid transform, camera looks down
//! +z with x right and y down (image coordinates). Rays are cast through
//! pixel centers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{mat3_vec, normalize3, scale3, sub3, RigidTransform, Vec3};
use crate::tape::Var;
use crate::tensor::Result as TensorResult;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("pixel ({u}, {v}) outside {width}x{height} frame")]
    PixelOutOfFrame {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_camera: RigidTransform,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(RenderError::InvalidCamera("focal must be positive".into()));
        }
        if crate::kinematics::rotation_defect(&self.world_to_camera.r) > 1e-6 {
            return Err(RenderError::InvalidCamera(
                "extrinsic rotation is not orthonormal".into(),
            ));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target` (y-down image convention).
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Camera {
        let forward = normalize3(sub3(target, eye)); // camera +z
        let right = normalize3(crate::kinematics::cross3(forward, up)); // +x
        let down = crate::kinematics::cross3(forward, right); // +y (image down)
        // rows of R are the camera axes expressed in world coordinates
        let r = [right, down, forward];
        let t = scale3(mat3_vec(&r, eye), -1.0);
        Camera {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            world_to_camera: RigidTransform { r, t },
            width,
            height,
        }
    }

    pub fn camera_to_world(&self) -> RigidTransform {
        self.world_to_camera.inverse()
    }

    /// World-space ray through an image position (pixels). Errors outside
    /// the frame.
    pub fn ray(&self, u: f64, v: f64) -> Result<(Vec3, Vec3), RenderError> {
        if u < 0.0 || v < 0.0 || u > self.width as f64 || v > self.height as f64 {
            return Err(RenderError::PixelOutOfFrame {
                u,
                v,
                width: self.width,
                height: self.height,
            });
        }
        let dir_cam = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        let c2w = self.camera_to_world();
        let dir = normalize3(mat3_vec(&c2w.r, dir_cam));
        Ok((c2w.t, dir))
    }

    /// Project a world point to pixel coordinates (None behind the camera).
    pub fn project(&self, x: Vec3) -> Option<(f64, f64)> {
        let c = self.world_to_camera.apply(x);
        if c[2] <= 1e-12 {
            return None;
        }
        Some((self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy))
    }
}

/// Per-pixel rays with their sampling bounds.
#[derive(Debug, Clone)]
pub struct RayBatch {
    pub pixels: Vec<(u32, u32)>,
    pub origins: Vec<Vec3>,
    pub dirs: Vec<Vec3>,
    pub near: Vec<f64>,
    pub far: Vec<f64>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

/// Back-project pixel centers into world rays. Near/far start unset (0);
/// callers clip against the scene bounds.
pub fn gen_rays(camera: &Camera, pixels: &[(u32, u32)]) -> Result<RayBatch, RenderError> {
    let mut batch = RayBatch {
        pixels: pixels.to_vec(),
        origins: Vec::with_capacity(pixels.len()),
        dirs: Vec::with_capacity(pixels.len()),
        near: vec![0.0; pixels.len()],
        far: vec![0.0; pixels.len()],
    };
    for &(u, v) in pixels {
        if u as usize >= camera.width || v as usize >= camera.height {
            return Err(RenderError::PixelOutOfFrame {
                u: u as f64,
                v: v as f64,
                width: camera.width,
                height: camera.height,
            });
        }
        let (o, d) = camera.ray(u as f64 + 0.5, v as f64 + 0.5)?;
        batch.origins.push(o);
        batch.dirs.push(d);
    }
    Ok(batch)
}

/// Slab clip of a ray against an axis-aligned box; `None` when it misses.
pub fn ray_box_clip(origin: Vec3, dir: Vec3, lo: Vec3, hi: Vec3) -> Option<(f64, f64)> {
    let mut t0 = 0.0_f64;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        if dir[k].abs() < 1e-12 {
            if origin[k] < lo[k] || origin[k] > hi[k] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[k];
        let (mut a, mut b) = ((lo[k] - origin[k]) * inv, (hi[k] - origin[k]) * inv);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

/// Q stratified depths: equal-width bins over [near, far], midpoints when
/// `rng` is None, one uniform draw per bin otherwise.
pub fn stratified_samples(near: f64, far: f64, q: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<f64> {
    let w = (far - near) / q as f64;
    match rng {
        None => (0..q).map(|i| near + w * (i as f64 + 0.5)).collect(),
        Some(rng) => (0..q)
            .map(|i| near + w * (i as f64 + rng.gen_range(0.0..1.0)))
            .collect(),
    }
}

/// Spacings between consecutive samples; the terminal spacing runs to
/// `far`.
pub fn deltas(depths: &[f64], far: f64) -> Vec<f64> {
    let q = depths.len();
    (0..q)
        .map(|i| {
            if i + 1 < q {
                depths[i + 1] - depths[i]
            } else {
                far - depths[q - 1]
            }
        })
        .collect()
}

/// Emission-absorption compositing along one ray:
/// pixel = sum_q T_q (1 - e^{-sigma_q delta_q}) c_q with
/// T_q = exp(-sum_{j<q} sigma_j delta_j). Returns (rgb, alpha).
pub fn composite(colors: &[[f64; 3]], densities: &[f64], deltas: &[f64]) -> ([f64; 3], f64) {
    assert_eq!(colors.len(), densities.len());
    assert_eq!(colors.len(), deltas.len());
    let mut acc = 0.0_f64; // running sum of sigma*delta
    let mut rgb = [0.0; 3];
    let mut alpha = 0.0;
    for q in 0..colors.len() {
        let t = (-acc).exp();
        let a = 1.0 - (-densities[q] * deltas[q]).exp();
        let w = t * a;
        for c in 0..3 {
            rgb[c] += w * colors[q][c];
        }
        alpha += w;
        acc += densities[q] * deltas[q];
    }
    (rgb, alpha)
}

/// Per-sample transmittances T_q (before absorption at q).
pub fn transmittances(densities: &[f64], deltas: &[f64]) -> Vec<f64> {
    let mut acc = 0.0_f64;
    let mut out = Vec::with_capacity(densities.len());
    for q in 0..densities.len() {
        out.push((-acc).exp());
        acc += densities[q] * deltas[q];
    }
    out
}

/// Tape-level compositing over `rays * q` flattened samples.
///
/// `sigma` is `[n,1]`, `color` `[n,3]`, `delta` `[n,1]` constant spacings;
/// samples of one ray are consecutive. Returns (`[rays,3]` rgb,
/// `[rays,1]` alpha, `[n,1]` per-sample weights T_q a_q).
pub fn composite_var<'t>(
    sigma: Var<'t>,
    color: Var<'t>,
    delta: Var<'t>,
    q: usize,
) -> TensorResult<(Var<'t>, Var<'t>, Var<'t>)> {
    let sd = sigma.mul(delta)?;
    let transmittance = sd.segment_cumsum_exclusive(q)?.neg().exp();
    let absorb = sd.neg().exp().neg().add_const(1.0);
    let weights = transmittance.mul(absorb)?;
    let rgb = color.mul_col(weights)?.segment_sum(q)?;
    let alpha = weights.segment_sum(q)?;
    Ok((rgb, alpha, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{add3, norm};
    use rand::SeedableRng;

    fn test_camera() -> Camera {
        Camera::look_at(
            [0.0, 1.0, -2.5],
            [0.0, 0.9, 0.0],
            [0.0, 1.0, 0.0],
            90.0,
            64,
            64,
        )
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let cam = test_camera();
        let (_, d) = cam.ray(cam.cx, cam.cy).unwrap();
        let c2w = cam.camera_to_world();
        let axis = mat3_vec(&c2w.r, [0.0, 0.0, 1.0]);
        assert!(norm(sub3(d, normalize3(axis))) < 1e-12);
    }

    #[test]
    fn symmetric_pixels_mirror() {
        let cam = test_camera();
        let (o1, d1) = cam.ray(cam.cx + 10.0, cam.cy).unwrap();
        let (o2, d2) = cam.ray(cam.cx - 10.0, cam.cy).unwrap();
        assert_eq!(o1, o2);
        // mirrored about the optical axis: equal z components in camera frame
        let w2c = &cam.world_to_camera.r;
        let c1 = mat3_vec(w2c, d1);
        let c2 = mat3_vec(w2c, d2);
        assert!((c1[0] + c2[0]).abs() < 1e-12);
        assert!((c1[2] - c2[2]).abs() < 1e-12);
    }

    #[test]
    fn reprojection_hits_source_pixel() {
        let cam = test_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let u = rng.gen_range(0.0..64.0);
            let v = rng.gen_range(0.0..64.0);
            let (o, d) = cam.ray(u, v).unwrap();
            let t = rng.gen_range(0.5..5.0);
            let p = add3(o, scale3(d, t));
            let (pu, pv) = cam.project(p).unwrap();
            assert!((pu - u).abs() < 1e-8, "{pu} vs {u}");
            assert!((pv - v).abs() < 1e-8);
        }
    }

    #[test]
    fn out_of_frame_pixel_errors() {
        let cam = test_camera();
        assert!(gen_rays(&cam, &[(64, 0)]).is_err());
        assert!(cam.ray(-1.0, 5.0).is_err());
    }

    #[test]
    fn stratified_midpoints_and_bins() {
        let s = stratified_samples(0.0, 1.0, 2, None);
        assert_eq!(s, vec![0.25, 0.75]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = 8;
        let s = stratified_samples(2.0, 4.0, q, Some(&mut rng));
        let w = 2.0 / q as f64;
        for (i, t) in s.iter().enumerate() {
            let lo = 2.0 + w * i as f64;
            assert!(*t >= lo && *t < lo + w, "sample {t} outside bin {i}");
        }
    }

    #[test]
    fn stratified_mean_is_bin_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = 4;
        let n = 10_000;
        let mut sums = vec![0.0; q];
        for _ in 0..n {
            let s = stratified_samples(0.0, 1.0, q, Some(&mut rng));
            for (acc, v) in sums.iter_mut().zip(&s) {
                *acc += v;
            }
        }
        for (i, acc) in sums.iter().enumerate() {
            let mean = acc / n as f64;
            let mid = (i as f64 + 0.5) / q as f64;
            assert!((mean - mid).abs() < 0.01, "bin {i}: {mean} vs {mid}");
        }
    }

    #[test]
    fn composite_zero_density_is_black_with_unit_transmittance() {
        let colors = [[1.0, 0.5, 0.2]; 4];
        let sigmas = [0.0; 4];
        let ds = [0.5; 4];
        let (rgb, alpha) = composite(&colors, &sigmas, &ds);
        assert_eq!(rgb, [0.0; 3]);
        assert_eq!(alpha, 0.0);
        assert!(transmittances(&sigmas, &ds).iter().all(|&t| t == 1.0));
    }

    #[test]
    fn composite_single_sample_analytic() {
        // sigma*delta = ln 2: alpha = 1 - 1/2 = 0.5
        let c = [0.8, 0.4, 0.1];
        let (rgb, alpha) = composite(&[c], &[2.0f64.ln()], &[1.0]);
        assert!((alpha - 0.5).abs() < 1e-12);
        for k in 0..3 {
            assert!((rgb[k] - 0.5 * c[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_matches_sequential_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let q = rng.gen_range(1..12);
            let colors: Vec<[f64; 3]> =
                (0..q).map(|_| std::array::from_fn(|_| rng.gen_range(0.0..1.0))).collect();
            let sigmas: Vec<f64> = (0..q).map(|_| rng.gen_range(0.0..4.0)).collect();
            let ds: Vec<f64> = (0..q).map(|_| rng.gen_range(0.01..0.5)).collect();
            let (rgb, alpha) = composite(&colors, &sigmas, &ds);

            // sequential-accumulation oracle
            let mut t = 1.0;
            let mut orgb = [0.0; 3];
            let mut oalpha = 0.0;
            for i in 0..q {
                let a = 1.0 - (-sigmas[i] * ds[i]).exp();
                for k in 0..3 {
                    orgb[k] += t * a * colors[i][k];
                }
                oalpha += t * a;
                t *= (-sigmas[i] * ds[i]).exp();
            }
            for k in 0..3 {
                assert!((rgb[k] - orgb[k]).abs() < 1e-9);
            }
            assert!((alpha - oalpha).abs() < 1e-9);
            assert!((0.0..=1.0 + 1e-12).contains(&alpha));
        }
    }

    #[test]
    fn transmittance_is_monotone_from_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sigmas: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..3.0)).collect();
        let ds = vec![0.1; 16];
        let t = transmittances(&sigmas, &ds);
        assert_eq!(t[0], 1.0);
        for w in t.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }

    #[test]
    fn splitting_a_sample_changes_pixel_by_second_order() {
        // one sample of width d vs two of width d/2 with equal sigma, c
        let c = [[0.7, 0.3, 0.9]];
        let c2 = [[0.7, 0.3, 0.9], [0.7, 0.3, 0.9]];
        let sigma = 1.7;
        let mut prev_err = f64::INFINITY;
        for d in [0.4, 0.2, 0.1, 0.05] {
            let (a, _) = composite(&c, &[sigma], &[d]);
            let (b, _) = composite(&c2, &[sigma; 2], &[d / 2.0; 2]);
            let err = (0..3).map(|k| (a[k] - b[k]).abs()).fold(0.0, f64::max);
            // halving d should shrink the gap by ~4x (second order)
            assert!(err < prev_err / 3.0 || err < 1e-12, "err {err} prev {prev_err}");
            prev_err = err;
        }
    }

    #[test]
    fn composite_var_matches_value_composite() {
        use crate::tape::Tape;
        use crate::tensor::Tensor;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (rays, q) = (5, 6);
        let n = rays * q;
        let sig: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
        let col: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let del: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.4)).collect();

        let tape = Tape::new();
        let sv = tape.constant(Tensor::new(&[n, 1], sig.clone()).unwrap());
        let cv = tape.constant(Tensor::new(&[n, 3], col.clone()).unwrap());
        let dv = tape.constant(Tensor::new(&[n, 1], del.clone()).unwrap());
        let (rgb, alpha, _) = composite_var(sv, cv, dv, q).unwrap();
        let rgb = rgb.to_tensor();
        let alpha = alpha.to_tensor();

        for r in 0..rays {
            let colors: Vec<[f64; 3]> = (0..q)
                .map(|i| std::array::from_fn(|k| col[(r * q + i) * 3 + k]))
                .collect();
            let sigmas = &sig[r * q..(r + 1) * q];
            let ds = &del[r * q..(r + 1) * q];
            let (orgb, oalpha) = composite(&colors, sigmas, ds);
            for k in 0..3 {
                assert!((rgb.get2(r, k) - orgb[k]).abs() < 1e-12);
            }
            assert!((alpha.get2(r, 0) - oalpha).abs() < 1e-12);
        }
    }
}
