//! Synthetic ground-truth data: an articulated capsule mannequin posed by
//! the skeleton, rendered analytically (exact ray/capsule intersections,
//! fixed-light lambertian shading), with masks, poses, cameras, and
//! train/novel-view/novel-pose splits written to a dataset directory.
//!
//! Directory layout:
//!
//! ```text
//! dataset/
//!   skeleton.txt    rest skeleton (kinematics text format)
//!   figure.json     per-bone capsule radius + albedo
//!   cameras.json    all cameras with train/novel id lists
//!   poses.json      all poses with train/novel id lists
//!   splits.json     frame lists [(pose_id, camera_id), ...] per split
//!   frames/p###_c##.ppm / .pgm   image and mask per frame
//! ```

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image_io::{GreyBuf, ImageBuf, ImageError};
use crate::kinematics::{
    add3, axis_angle_matrix, dot3, forward_kinematics, matrix_to_rot6d, norm, normalize3, scale3,
    sub3, BoneTransformSet, KinematicsError, Pose, SkeletonRest, Vec3, NUM_BONES,
};
use crate::renderer::Camera;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset: {0}")]
    Data(String),
}

type Result<T> = std::result::Result<T, SceneError>;

/// Per-bone capsule geometry and albedo. Capsules span bone head to tail
/// in the bone frame, so they move rigidly with the skeleton.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CapsuleFigure {
    pub radius: Vec<f64>,
    pub albedo: Vec<[f64; 3]>,
}

impl CapsuleFigure {
    /// Chunky mannequin with distinct per-part colors.
    pub fn default_figure() -> Self {
        let mut radius = vec![0.05; NUM_BONES];
        let mut albedo = vec![[0.8, 0.8, 0.8]; NUM_BONES];
        let torso = [0, 3, 6, 9];
        for i in torso {
            radius[i] = ((i as f64) * 0.005) + 0.10;
        }
        radius[12] = 0.055; // neck
        radius[15] = 0.095; // head
        radius[13] = 0.06; // collars
        radius[14] = 0.06;
        for i in [16, 17] {
            radius[i] = 0.055; // upper arms
        }
        for i in [18, 19] {
            radius[i] = 0.05; // forearms
        }
        for i in [20, 21] {
            radius[i] = 0.045; // wrists
        }
        for i in [22, 23] {
            radius[i] = 0.045; // hands
        }
        for i in [1, 2] {
            radius[i] = 0.085; // hips/thighs
        }
        for i in [4, 5] {
            radius[i] = 0.07; // knees/calves
        }
        for i in [7, 8] {
            radius[i] = 0.055; // ankles
        }
        for i in [10, 11] {
            radius[i] = 0.05; // feet
        }

        let palette: [[f64; 3]; 12] = [
            [0.85, 0.30, 0.25],
            [0.25, 0.55, 0.85],
            [0.30, 0.75, 0.35],
            [0.90, 0.70, 0.20],
            [0.60, 0.35, 0.80],
            [0.20, 0.75, 0.75],
            [0.85, 0.45, 0.65],
            [0.55, 0.65, 0.25],
            [0.40, 0.40, 0.90],
            [0.90, 0.55, 0.30],
            [0.35, 0.70, 0.55],
            [0.75, 0.30, 0.45],
        ];
        for i in 0..NUM_BONES {
            albedo[i] = palette[i % palette.len()];
        }
        CapsuleFigure { radius, albedo }
    }

    pub fn validate(&self) -> Result<()> {
        if self.radius.len() != NUM_BONES || self.albedo.len() != NUM_BONES {
            return Err(SceneError::Data("figure needs 24 capsules".into()));
        }
        if self.radius.iter().any(|&r| r <= 0.0) {
            return Err(SceneError::Data("capsule radii must be positive".into()));
        }
        if self
            .albedo
            .iter()
            .flatten()
            .any(|c| !(0.0..=1.0).contains(c))
        {
            return Err(SceneError::Data("albedo outside [0,1]".into()));
        }
        Ok(())
    }
}

/// Closest forward intersection of a ray with a capsule (segment a-b,
/// radius r). Returns (t, surface normal).
pub fn ray_capsule(o: Vec3, d: Vec3, a: Vec3, b: Vec3, r: f64) -> Option<(f64, Vec3)> {
    let ba = sub3(b, a);
    let len2 = dot3(ba, ba);
    let mut best: Option<(f64, Vec3)> = None;

    // infinite-cylinder part clipped to the segment
    if len2 > 1e-12 {
        let oa = sub3(o, a);
        let baod = dot3(ba, d);
        let baoa = dot3(ba, oa);
        // components perpendicular to the axis, for unit d:
        // |d_perp|^2 t^2 + 2 (oa_perp . d_perp) t + |oa_perp|^2 - r^2 = 0
        let qa = 1.0 - baod * baod / len2;
        let qb = dot3(oa, d) - baoa * baod / len2;
        let qc = dot3(oa, oa) - baoa * baoa / len2 - r * r;
        let a2 = qa.max(0.0);
        if a2 > 1e-12 {
            let disc = qb * qb - a2 * qc;
            if disc >= 0.0 {
                let t = (-qb - disc.sqrt()) / a2;
                if t > 1e-6 {
                    let p = add3(o, scale3(d, t));
                    let s = dot3(sub3(p, a), ba) / len2;
                    if (0.0..=1.0).contains(&s) {
                        let axis_pt = add3(a, scale3(ba, s));
                        best = Some((t, normalize3(sub3(p, axis_pt))));
                    }
                }
            }
        }
    }

    // spherical caps
    for c in [a, b] {
        let oc = sub3(o, c);
        let qb = dot3(oc, d);
        let qc = dot3(oc, oc) - r * r;
        let disc = qb * qb - qc;
        if disc >= 0.0 {
            let t = -qb - disc.sqrt();
            if t > 1e-6 && best.map_or(true, |(bt, _)| t < bt) {
                let p = add3(o, scale3(d, t));
                best = Some((t, normalize3(sub3(p, c))));
            }
        }
    }
    best
}

/// Posed capsule endpoints in world space.
pub fn posed_capsules(
    figure: &CapsuleFigure,
    transforms: &BoneTransformSet,
    rest: &SkeletonRest,
) -> Vec<(Vec3, Vec3, f64)> {
    (0..NUM_BONES)
        .map(|i| {
            (
                transforms.head(i),
                transforms.tail(i, rest),
                figure.radius[i],
            )
        })
        .collect()
}

pub const LIGHT_DIR: Vec3 = [0.40824829046386307, 0.8164965809277261, -0.40824829046386307];

/// One rendered ground-truth frame.
#[derive(Debug, Clone)]
pub struct SceneFrame {
    pub image: ImageBuf,
    pub mask: GreyBuf,
    pub pose_id: usize,
    pub camera_id: usize,
}

/// Analytic render: nearest capsule hit per pixel ray, lambertian shading
/// `albedo * (0.3 + 0.7 max(0, n.l))`, white background. The mask is 1
/// exactly where a capsule is hit. `part_of` (when given) receives the
/// nearest capsule index per pixel, -1 on background.
pub fn render_gt_with_parts(
    figure: &CapsuleFigure,
    pose: &Pose,
    camera: &Camera,
    rest: &SkeletonRest,
    mut part_of: Option<&mut Vec<i32>>,
) -> Result<(ImageBuf, GreyBuf)> {
    figure.validate()?;
    let transforms = forward_kinematics(pose, rest)?;
    let capsules = posed_capsules(figure, &transforms, rest);
    let mut img = ImageBuf::new(camera.width, camera.height);
    let mut mask = GreyBuf::new(camera.width, camera.height);
    if let Some(p) = part_of.as_deref_mut() {
        p.clear();
        p.resize(camera.width * camera.height, -1);
    }
    for y in 0..camera.height {
        for x in 0..camera.width {
            let (o, d) = camera
                .ray(x as f64 + 0.5, y as f64 + 0.5)
                .map_err(|e| SceneError::Data(e.to_string()))?;
            let mut nearest: Option<(f64, Vec3, usize)> = None;
            for (i, &(a, b, r)) in capsules.iter().enumerate() {
                if let Some((t, n)) = ray_capsule(o, d, a, b, r) {
                    if nearest.map_or(true, |(bt, _, _)| t < bt) {
                        nearest = Some((t, n, i));
                    }
                }
            }
            match nearest {
                Some((_, n, i)) => {
                    let shade = 0.3 + 0.7 * dot3(n, LIGHT_DIR).max(0.0);
                    let c = figure.albedo[i];
                    img.set(x, y, [c[0] * shade, c[1] * shade, c[2] * shade]);
                    mask.set(x, y, 1.0);
                    if let Some(p) = part_of.as_deref_mut() {
                        p[y * camera.width + x] = i as i32;
                    }
                }
                None => img.set(x, y, [1.0, 1.0, 1.0]),
            }
        }
    }
    Ok((img, mask))
}

pub fn render_gt(
    figure: &CapsuleFigure,
    pose: &Pose,
    camera: &Camera,
    rest: &SkeletonRest,
) -> Result<(ImageBuf, GreyBuf)> {
    render_gt_with_parts(figure, pose, camera, rest, None)
}

// ── pose sampling ────────────────────────────────────────────────────────

/// Per-joint limits (radians) for the random sampler; 45 degrees max.
const JOINT_LIMIT: f64 = std::f64::consts::FRAC_PI_4;

/// Random pose: independent per-joint axis-angle perturbations within the
/// limit, small root translation jitter. The root orientation stays fixed
/// so cameras keep facing the figure.
pub fn sample_pose(rng: &mut ChaCha8Rng) -> Pose {
    let mut pose = Pose::rest();
    for i in 1..NUM_BONES {
        let axis: Vec3 = loop {
            let v: Vec3 = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            if norm(v) > 0.1 {
                break v;
            }
        };
        let angle = rng.gen_range(-JOINT_LIMIT..JOINT_LIMIT);
        pose.rotations[i] = matrix_to_rot6d(&axis_angle_matrix(axis, angle));
    }
    pose.root_translation = std::array::from_fn(|_| rng.gen_range(-0.05..0.05));
    pose
}

/// Hand-built poses bringing the forearms across the chest, exercising
/// volume overlap between arms and torso.
pub fn arms_crossed_poses() -> Vec<Pose> {
    let mut out = Vec::new();
    for (shoulder_deg, elbow_deg) in [(60.0_f64, 75.0_f64), (45.0, 95.0)] {
        let mut pose = Pose::rest();
        // rotate shoulders forward about the vertical axis, bend elbows in
        let s = shoulder_deg.to_radians();
        let e = elbow_deg.to_radians();
        pose.rotations[16] = matrix_to_rot6d(&axis_angle_matrix([0.0, 1.0, 0.0], -s));
        pose.rotations[17] = matrix_to_rot6d(&axis_angle_matrix([0.0, 1.0, 0.0], s));
        pose.rotations[18] = matrix_to_rot6d(&axis_angle_matrix([0.0, 1.0, 0.0], -e));
        pose.rotations[19] = matrix_to_rot6d(&axis_angle_matrix([0.0, 1.0, 0.0], e));
        out.push(pose);
    }
    out
}

/// Ring of cameras around the figure, all aimed at the torso.
pub fn ring_cameras(
    count: usize,
    phase: f64,
    radius: f64,
    height: f64,
    focal: f64,
    res: (usize, usize),
) -> Vec<Camera> {
    (0..count)
        .map(|i| {
            let a = phase + i as f64 * std::f64::consts::TAU / count as f64;
            Camera::look_at(
                [radius * a.sin(), height, -radius * a.cos()],
                [0.0, 0.95, 0.0],
                [0.0, 1.0, 0.0],
                focal,
                res.0,
                res.1,
            )
        })
        .collect()
}

// ── dataset ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<(usize, usize)>,
    pub novel_view: Vec<(usize, usize)>,
    pub novel_pose: Vec<(usize, usize)>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Option<&[(usize, usize)]> {
        match name {
            "train" => Some(&self.train),
            "novel-view" => Some(&self.novel_view),
            "novel-pose" => Some(&self.novel_pose),
            _ => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CamerasDoc {
    cameras: Vec<Camera>,
    train_ids: Vec<usize>,
    novel_ids: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct PosesDoc {
    poses: Vec<Pose>,
    train_ids: Vec<usize>,
    novel_ids: Vec<usize>,
}

pub struct Dataset {
    pub dir: PathBuf,
    pub rest: SkeletonRest,
    pub figure: CapsuleFigure,
    pub poses: Vec<Pose>,
    pub cameras: Vec<Camera>,
    pub train_pose_ids: Vec<usize>,
    pub novel_pose_ids: Vec<usize>,
    pub train_camera_ids: Vec<usize>,
    pub novel_camera_ids: Vec<usize>,
    pub splits: Splits,
}

impl Dataset {
    pub fn frame_stem(pose_id: usize, camera_id: usize) -> String {
        format!("p{pose_id:03}_c{camera_id:02}")
    }

    pub fn load_frame(&self, pose_id: usize, camera_id: usize) -> Result<SceneFrame> {
        let stem = Self::frame_stem(pose_id, camera_id);
        let image = ImageBuf::load_ppm(&self.dir.join("frames").join(format!("{stem}.ppm")))?;
        let mask = GreyBuf::load_pgm(&self.dir.join("frames").join(format!("{stem}.pgm")))?;
        Ok(SceneFrame {
            image,
            mask,
            pose_id,
            camera_id,
        })
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let rest = SkeletonRest::load(&dir.join("skeleton.txt"))?;
        let figure: CapsuleFigure =
            serde_json::from_str(&std::fs::read_to_string(dir.join("figure.json"))?)
                .map_err(|e| SceneError::Data(format!("figure.json: {e}")))?;
        let cams: CamerasDoc =
            serde_json::from_str(&std::fs::read_to_string(dir.join("cameras.json"))?)
                .map_err(|e| SceneError::Data(format!("cameras.json: {e}")))?;
        let poses: PosesDoc =
            serde_json::from_str(&std::fs::read_to_string(dir.join("poses.json"))?)
                .map_err(|e| SceneError::Data(format!("poses.json: {e}")))?;
        let splits: Splits =
            serde_json::from_str(&std::fs::read_to_string(dir.join("splits.json"))?)
                .map_err(|e| SceneError::Data(format!("splits.json: {e}")))?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            rest,
            figure: {
                let f = figure;
                f.validate()?;
                f
            },
            poses: poses.poses,
            cameras: cams.cameras,
            train_pose_ids: poses.train_ids,
            novel_pose_ids: poses.novel_ids,
            train_camera_ids: cams.train_ids,
            novel_camera_ids: cams.novel_ids,
            splits,
        })
    }
}

pub struct MakeDatasetOptions {
    pub n_poses: usize,
    pub n_cameras: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub n_novel_cameras: usize,
    pub n_novel_poses: usize,
}

impl Default for MakeDatasetOptions {
    fn default() -> Self {
        MakeDatasetOptions {
            n_poses: 20,
            n_cameras: 8,
            width: 64,
            height: 64,
            seed: 0,
            n_novel_cameras: 4,
            n_novel_poses: 10,
        }
    }
}

/// Generate and write the full dataset. Deterministic in the seed.
///
/// Train poses include the rest pose and two arms-crossed poses; the rest
/// are sampled. Novel-view frames pair held-out cameras with a subset of
/// train poses; novel-pose frames pair held-out poses with train cameras.
pub fn make_dataset(dir: &Path, opts: &MakeDatasetOptions) -> Result<Dataset> {
    if opts.n_poses < 3 {
        return Err(SceneError::Data("need at least 3 train poses".into()));
    }
    let rest = SkeletonRest::default_skeleton();
    let figure = CapsuleFigure::default_figure();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut poses = vec![Pose::rest()];
    poses.extend(arms_crossed_poses());
    while poses.len() < opts.n_poses {
        poses.push(sample_pose(&mut rng));
    }
    poses.truncate(opts.n_poses);
    let train_pose_ids: Vec<usize> = (0..opts.n_poses).collect();
    let mut novel_pose_ids = Vec::new();
    for _ in 0..opts.n_novel_poses {
        novel_pose_ids.push(poses.len());
        poses.push(sample_pose(&mut rng));
    }

    let res = (opts.width, opts.height);
    let focal = 1.45 * opts.width as f64;
    let mut cameras = ring_cameras(opts.n_cameras, 0.0, 2.6, 1.1, focal, res);
    let train_camera_ids: Vec<usize> = (0..opts.n_cameras).collect();
    let novel_phase = std::f64::consts::TAU / (2 * opts.n_cameras.max(1)) as f64;
    let novel_cams = ring_cameras(opts.n_novel_cameras, novel_phase, 2.75, 0.75, focal, res);
    let novel_camera_ids: Vec<usize> = (0..opts.n_novel_cameras)
        .map(|i| opts.n_cameras + i)
        .collect();
    cameras.extend(novel_cams);

    let train: Vec<(usize, usize)> = train_pose_ids
        .iter()
        .flat_map(|&p| train_camera_ids.iter().map(move |&c| (p, c)))
        .collect();
    // novel view: held-out cameras on a spread of train poses
    let nv_pose_stride = (opts.n_poses / 5).max(1);
    let novel_view: Vec<(usize, usize)> = train_pose_ids
        .iter()
        .step_by(nv_pose_stride)
        .flat_map(|&p| novel_camera_ids.iter().map(move |&c| (p, c)))
        .collect();
    // novel pose: held-out poses from two train cameras
    let np_cams: Vec<usize> = train_camera_ids
        .iter()
        .copied()
        .step_by((opts.n_cameras / 2).max(1))
        .take(2)
        .collect();
    let novel_pose: Vec<(usize, usize)> = novel_pose_ids
        .iter()
        .flat_map(|&p| np_cams.iter().map(move |&c| (p, c)))
        .collect();
    let splits = Splits {
        train,
        novel_view,
        novel_pose,
    };

    std::fs::create_dir_all(dir.join("frames"))?;
    std::fs::write(dir.join("skeleton.txt"), rest.to_text())?;
    std::fs::write(
        dir.join("figure.json"),
        serde_json::to_string_pretty(&figure).unwrap(),
    )?;
    std::fs::write(
        dir.join("cameras.json"),
        serde_json::to_string_pretty(&CamerasDoc {
            cameras: cameras.clone(),
            train_ids: train_camera_ids.clone(),
            novel_ids: novel_camera_ids.clone(),
        })
        .unwrap(),
    )?;
    std::fs::write(
        dir.join("poses.json"),
        serde_json::to_string_pretty(&PosesDoc {
            poses: poses.clone(),
            train_ids: train_pose_ids.clone(),
            novel_ids: novel_pose_ids.clone(),
        })
        .unwrap(),
    )?;
    std::fs::write(
        dir.join("splits.json"),
        serde_json::to_string_pretty(&splits).unwrap(),
    )?;

    let mut all_frames: Vec<(usize, usize)> = splits
        .train
        .iter()
        .chain(&splits.novel_view)
        .chain(&splits.novel_pose)
        .copied()
        .collect();
    all_frames.sort_unstable();
    all_frames.dedup();
    for (p, c) in all_frames {
        let (img, mask) = render_gt(&figure, &poses[p], &cameras[c], &rest)?;
        let stem = Dataset::frame_stem(p, c);
        img.save_ppm(&dir.join("frames").join(format!("{stem}.ppm")))?;
        mask.save_pgm(&dir.join("frames").join(format!("{stem}.pgm")))?;
    }

    Ok(Dataset {
        dir: dir.to_path_buf(),
        rest,
        figure,
        poses,
        cameras,
        train_pose_ids,
        novel_pose_ids,
        train_camera_ids,
        novel_camera_ids,
        splits,
    })
}
