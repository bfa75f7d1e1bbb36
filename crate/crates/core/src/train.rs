//! Training loop: one image per step, rays sampled mostly from the dilated
//! foreground mask, loss assembled on a fresh tape, Adam update with
//! exponential learning-rate decay.
//!
//! Every random choice derives from (seed, step), never from mutable rng
//! state carried across steps, so resuming from a checkpoint continues
//! bit-exactly and two runs with one seed are identical.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::Config;
use crate::image_io::{GreyBuf, ImageBuf};
use crate::kinematics::Vec3;
use crate::losses::{l1_sum, total_loss};
use crate::model::{Model, ModelError};
use crate::params::{lr_schedule, Adam, Checkpoint, CheckpointError};
use crate::renderer::{gen_rays, ray_box_clip, RayBatch};
use crate::scene::{Dataset, SceneError};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { step: u64, term: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

type Result<T> = std::result::Result<T, TrainError>;

/// One row of the metrics log.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub step: u64,
    pub l_p: f64,
    pub l_v: f64,
    pub l_s: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "step,l_p,l_v,l_s,lr,wall_seconds";

impl StepStats {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.l_p, self.l_v, self.l_s, self.lr, self.wall_seconds
        )
    }
}

struct FrameCache {
    image: ImageBuf,
    pose_id: usize,
    camera_id: usize,
    /// Pixels inside the dilated foreground mask.
    fg_pixels: Vec<(u32, u32)>,
}

fn dilate_mask(mask: &GreyBuf, radius: usize) -> Vec<(u32, u32)> {
    let (w, h) = (mask.width, mask.height);
    let r = radius as i64;
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut near_fg = false;
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0
                        && ny >= 0
                        && nx < w as i64
                        && ny < h as i64
                        && mask.get(nx as usize, ny as usize) > 0.5
                    {
                        near_fg = true;
                        break 'scan;
                    }
                }
            }
            if near_fg {
                out.push((x as u32, y as u32));
            }
        }
    }
    out
}

fn mix64(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// The pixel batch for one step: mostly foreground-dilated samples, the
/// rest uniform, sorted so the batch is a canonical set (loss is invariant
/// to the sampler's draw order).
fn sample_pixels(
    rng: &mut ChaCha8Rng,
    frame: &FrameCache,
    count: usize,
    mask_ratio: f64,
    res: (usize, usize),
) -> Vec<(u32, u32)> {
    let n_fg = ((count as f64) * mask_ratio).round() as usize;
    let mut pixels = Vec::with_capacity(count);
    for i in 0..count {
        if i < n_fg && !frame.fg_pixels.is_empty() {
            pixels.push(frame.fg_pixels[rng.gen_range(0..frame.fg_pixels.len())]);
        } else {
            pixels.push((
                rng.gen_range(0..res.0 as u32),
                rng.gen_range(0..res.1 as u32),
            ));
        }
    }
    pixels.sort_unstable_by_key(|&(u, v)| (v, u));
    pixels
}

pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub last_stats: Option<StepStats>,
}

/// Run (or resume) training and return the final checkpoint.
///
/// `metrics_path` appends CSV rows (`step,l_p,l_v,l_s,lr,wall_seconds`).
/// A non-finite loss aborts with the offending term and step.
pub fn train(
    dataset: &Dataset,
    cfg: &Config,
    resume: Option<Checkpoint>,
    metrics_path: Option<&Path>,
    mut progress: Option<&mut dyn FnMut(&StepStats)>,
) -> Result<TrainResult> {
    train_until(dataset, cfg, resume, metrics_path, progress.take(), None)
}

/// `train` with an early stop: the learning-rate schedule and all
/// per-step randomness still follow `cfg.steps`, so a stopped run plus a
/// resume reproduces an uninterrupted run bit-exactly.
pub fn train_until(
    dataset: &Dataset,
    cfg: &Config,
    resume: Option<Checkpoint>,
    metrics_path: Option<&Path>,
    mut progress: Option<&mut dyn FnMut(&StepStats)>,
    stop_after: Option<u64>,
) -> Result<TrainResult> {
    let model = Model::new(cfg.clone(), dataset.rest.clone())?;
    let (mut params, mut adam, start_step) = match resume {
        Some(ck) => {
            let adam = match ck.opt {
                Some(a) => a,
                None => Adam::new(&ck.params),
            };
            (ck.params, adam, ck.step)
        }
        None => {
            let params = model.init_params(cfg.seed);
            let adam = Adam::new(&params);
            (params, adam, 0)
        }
    };

    // cache train frames, their foreground pixel sets, and per-pose bounds
    let mut frames = Vec::with_capacity(dataset.splits.train.len());
    for &(p, c) in &dataset.splits.train {
        let f = dataset.load_frame(p, c)?;
        frames.push(FrameCache {
            fg_pixels: dilate_mask(&f.mask, cfg.mask_dilation),
            image: f.image,
            pose_id: p,
            camera_id: c,
        });
    }
    if frames.is_empty() {
        return Err(TrainError::Other("empty training split".into()));
    }
    let mut bounds: Vec<Option<(Vec3, Vec3)>> = vec![None; dataset.poses.len()];

    let mut metrics = match metrics_path {
        Some(p) => {
            let fresh = !p.exists() || start_step == 0;
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(p)?;
            if fresh {
                writeln!(f, "{METRICS_HEADER}")?;
            }
            Some(f)
        }
        None => None,
    };

    let end_step = stop_after.unwrap_or(cfg.steps).min(cfg.steps);
    let t0 = Instant::now();
    let mut last_stats = None;
    for step in start_step..end_step {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed, step));
        let frame = &frames[rng.gen_range(0..frames.len())];
        let camera = &dataset.cameras[frame.camera_id];
        let pose = &dataset.poses[frame.pose_id];
        let pixels = sample_pixels(
            &mut rng,
            frame,
            cfg.rays_per_step,
            cfg.mask_ratio,
            (camera.width, camera.height),
        );

        let pose_bounds = *bounds[frame.pose_id]
            .get_or_insert_with(|| model.scene_bounds(pose).expect("pose bounds"));

        // split rays into box hits (on tape) and misses (constant background)
        let all = gen_rays(camera, &pixels).map_err(ModelError::Render)?;
        let mut hit = RayBatch {
            pixels: vec![],
            origins: vec![],
            dirs: vec![],
            near: vec![],
            far: vec![],
        };
        let mut miss_l1_sum = 0.0;
        let bg = cfg.background.rgb();
        let mut hit_gt = Vec::new();
        for i in 0..all.len() {
            let (u, v) = all.pixels[i];
            let gt = frame.image.get(u as usize, v as usize);
            match ray_box_clip(all.origins[i], all.dirs[i], pose_bounds.0, pose_bounds.1) {
                Some((t0r, t1r)) if t1r > t0r => {
                    hit.pixels.push((u, v));
                    hit.origins.push(all.origins[i]);
                    hit.dirs.push(all.dirs[i]);
                    hit.near.push(t0r.max(1e-4));
                    hit.far.push(t1r);
                    hit_gt.extend_from_slice(&gt);
                }
                _ => {
                    miss_l1_sum += gt.iter().zip(bg).map(|(g, b)| (g - b).abs()).sum::<f64>();
                }
            }
        }

        let n_total = pixels.len();
        let jitter = mix64(cfg.seed ^ 0xA5A5_5A5A, step);
        let (lp_val, lv_val, ls_val, grads_opt) = if hit.is_empty() {
            (miss_l1_sum / (3.0 * n_total as f64), 0.0, 0.0, None)
        } else {
            let batch = model.sample_rays(&hit, Some(jitter));
            let tape = Tape::new();
            let lifted = params.lift(&tape);
            let out = model.forward_samples(&tape, &lifted, pose, &batch)?;
            let gt = Tensor::new(&[hit.len(), 3], hit_gt).map_err(ModelError::Tensor)?;
            let lp = l1_sum(out.rgb, &gt)
                .map_err(ModelError::Tensor)?
                .add_const(miss_l1_sum)
                .scale(1.0 / (3.0 * n_total as f64));
            let total = total_loss(lp, out.volume_loss, out.ls, cfg.lambda_v, cfg.lambda_s)
                .map_err(ModelError::Tensor)?;

            let lp_val = lp.item().map_err(ModelError::Tensor)?;
            let lv_val = out
                .volume_loss
                .map(|v| v.item().unwrap_or(f64::NAN))
                .unwrap_or(0.0);
            let ls_val = out.ls.map(|v| v.item().unwrap_or(f64::NAN)).unwrap_or(0.0);
            for (v, term) in [
                (lp_val, "photometric"),
                (lv_val, "volume"),
                (ls_val, "soft-softmax"),
            ] {
                if !v.is_finite() {
                    return Err(TrainError::NonFiniteLoss { step, term });
                }
            }
            let grads = tape.backward(total).map_err(ModelError::Tensor)?;
            let ordered: Vec<Option<Tensor>> = lifted
                .ordered_vars()
                .iter()
                .map(|v| grads.get(*v).cloned())
                .collect();
            (lp_val, lv_val, ls_val, Some(ordered))
        };

        let lr = lr_schedule(cfg.lr, cfg.lr_final, step, cfg.steps);
        if let Some(grads) = grads_opt {
            adam.step(&mut params, &grads, lr);
        }

        let stats = StepStats {
            step,
            l_p: lp_val,
            l_v: lv_val,
            l_s: ls_val,
            lr,
            wall_seconds: t0.elapsed().as_secs_f64(),
        };
        if let Some(f) = metrics.as_mut() {
            if step % 25 == 0 || step + 1 == end_step {
                writeln!(f, "{}", stats.csv_row())?;
            }
        }
        if let Some(cb) = progress.as_mut() {
            cb(&stats);
        }
        last_stats = Some(stats);
    }

    let checkpoint = Checkpoint {
        step: end_step,
        config_json: cfg.to_json(),
        params,
        opt: Some(adam),
    };
    Ok(TrainResult {
        checkpoint,
        last_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{make_dataset, MakeDatasetOptions};

    fn quick_config() -> Config {
        Config {
            h: 2,
            m: 4,
            gnn_hidden: 8,
            field_width: 16,
            q: 16,
            rays_per_step: 64,
            steps: 3,
            render_chunk: 512,
            seed: 42,
            ..Config::default()
        }
    }

    fn tiny_dataset(tag: &str) -> Dataset {
        let dir = std::env::temp_dir().join(format!("bonefield-train-{tag}-{}", std::process::id()));
        make_dataset(
            &dir,
            &MakeDatasetOptions {
                n_poses: 3,
                n_cameras: 2,
                width: 24,
                height: 24,
                seed: 1,
                n_novel_cameras: 1,
                n_novel_poses: 1,
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let ds = tiny_dataset("zero");
        let mut cfg = quick_config();
        cfg.steps = 0;
        let out = train(&ds, &cfg, None, None, None).unwrap();
        let model = Model::new(cfg.clone(), ds.rest.clone()).unwrap();
        let fresh = model.init_params(cfg.seed);
        for ((n1, t1), (n2, t2)) in out.checkpoint.params.iter().zip(fresh.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
        }
        std::fs::remove_dir_all(&ds.dir).ok();
    }

    #[test]
    fn short_run_decreases_loss_and_is_deterministic() {
        let ds = tiny_dataset("det");
        let mut cfg = quick_config();
        cfg.steps = 12;
        let a = train(&ds, &cfg, None, None, None).unwrap();
        let b = train(&ds, &cfg, None, None, None).unwrap();
        for ((_, t1), (_, t2)) in a.checkpoint.params.iter().zip(b.checkpoint.params.iter()) {
            assert_eq!(t1.data(), t2.data(), "training must be bit-deterministic");
        }
        std::fs::remove_dir_all(&ds.dir).ok();
    }

    #[test]
    fn resume_continues_bit_exactly() {
        let ds = tiny_dataset("resume");
        let mut cfg = quick_config();
        cfg.steps = 8;
        let full = train(&ds, &cfg, None, None, None).unwrap();

        let half = train_until(&ds, &cfg, None, None, None, Some(4)).unwrap();
        assert_eq!(half.checkpoint.step, 4);
        let resumed = train(&ds, &cfg, Some(half.checkpoint), None, None).unwrap();
        for ((n1, t1), (_, t2)) in full
            .checkpoint
            .params
            .iter()
            .zip(resumed.checkpoint.params.iter())
        {
            assert_eq!(t1.data(), t2.data(), "param {n1} diverged after resume");
        }
        std::fs::remove_dir_all(&ds.dir).ok();
    }

    #[test]
    fn non_finite_parameter_aborts_with_term_name() {
        let ds = tiny_dataset("nan");
        let cfg = quick_config();
        let model = Model::new(cfg.clone(), ds.rest.clone()).unwrap();
        let mut params = model.init_params(cfg.seed);
        let t = params.get_mut("gnn.conv1.w").unwrap();
        for v in t.data_mut() {
            *v = f64::INFINITY;
        }
        let ck = Checkpoint {
            step: 0,
            config_json: cfg.to_json(),
            params,
            opt: None,
        };
        let err = match train(&ds, &cfg, Some(ck), None, None) {
            Err(e) => e,
            Ok(_) => panic!("training with an infinite parameter must abort"),
        };
        let msg = err.to_string();
        assert!(msg.contains("photometric"), "message names the term: {msg}");
        std::fs::remove_dir_all(&ds.dir).ok();
    }
}
