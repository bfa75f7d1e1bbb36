//! Command-line interface: dataset generation, training, rendering,
//! evaluation, ablation grids, mesh extraction, and the self-test.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{Background, Config, ModelVariant, VolumeType};
use crate::aggregation::AggregationStrategy;
use crate::kinematics::{Pose, SkeletonRest};
use crate::mesh::{density_grid, marching_cubes};
use crate::metrics::eval_split;
use crate::model::Model;
use crate::params::Checkpoint;
use crate::renderer::Camera;
use crate::scene::{make_dataset, Dataset, MakeDatasetOptions};
use crate::selfcheck::run_all;
use crate::train::train_until;

#[derive(Parser)]
#[command(
    name = "bonefield",
    about = "Articulated neural body fields: per-bone factorized volumes on a skeleton graph, learned aggregation, differentiable volume rendering",
    version
)]
pub struct CliArgs {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug)]
pub struct CliError {
    pub message: String,
    pub exit_code: i32,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError {
            message: msg.into(),
            exit_code: 1,
        }
    }

    fn runtime(msg: impl Into<String>) -> Self {
        CliError {
            message: msg.into(),
            exit_code: 2,
        }
    }
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::runtime(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Optional overrides for every config field, applied over `--config`.
#[derive(Args, Debug, Default)]
pub struct ConfigOverrides {
    #[arg(long)]
    pub h: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub m_dense: Option<usize>,
    #[arg(long)]
    pub gnn_hidden: Option<usize>,
    #[arg(long)]
    pub field_width: Option<usize>,
    #[arg(long)]
    pub strategy: Option<AggregationStrategy>,
    #[arg(long)]
    pub agg_graph_layer: Option<bool>,
    #[arg(long)]
    pub variant: Option<ModelVariant>,
    #[arg(long)]
    pub volume_type: Option<VolumeType>,
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long)]
    pub bbox_dilation: Option<f64>,
    #[arg(long)]
    pub background: Option<Background>,
    #[arg(long)]
    pub render_chunk: Option<usize>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub rays_per_step: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_final: Option<f64>,
    #[arg(long)]
    pub lambda_v: Option<f64>,
    #[arg(long)]
    pub lambda_s: Option<f64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub mask_dilation: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigOverrides {
    pub fn apply(&self, cfg: &mut Config) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { cfg.$f = v; } )* };
        }
        set!(
            h,
            m,
            m_dense,
            gnn_hidden,
            field_width,
            strategy,
            agg_graph_layer,
            variant,
            volume_type,
            q,
            bbox_dilation,
            background,
            render_chunk,
            steps,
            rays_per_step,
            lr,
            lr_final,
            lambda_v,
            lambda_s,
            mask_ratio,
            mask_dilation,
            seed
        );
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the synthetic capsule-figure dataset.
    MakeData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        poses: usize,
        #[arg(long, default_value_t = 8)]
        cameras: usize,
        /// Resolution as WxH, e.g. 64x64.
        #[arg(long, default_value = "64x64")]
        res: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        novel_cameras: usize,
        #[arg(long, default_value_t = 10)]
        novel_poses: usize,
        /// Overwrite an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Metrics CSV (step, l_p, l_v, l_s, lr, wall_seconds).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Stop after this step but keep the full-run schedule.
        #[arg(long)]
        stop_after: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        /// Print progress every N steps (0 silences).
        #[arg(long, default_value_t = 500)]
        log_every: u64,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Render images from a checkpoint: a dataset split, or one pose/camera
    /// JSON pair (animation mode).
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        pose: Option<PathBuf>,
        #[arg(long)]
        camera: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Depth-jitter seed; omitted = deterministic bin midpoints.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        render_chunk: Option<usize>,
    },
    /// Evaluate PSNR/SSIM over a split and write the per-frame CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Train and evaluate a variant grid with a shared seed and budget.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// One of: aggregation, volume-type, modules.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Extract an isosurface mesh from the learned density field.
    ExtractMesh {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pose: PathBuf,
        #[arg(long, default_value_t = 64)]
        res: usize,
        #[arg(long, default_value_t = 5.0)]
        iso: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run gradient checks and oracle suites; nonzero exit on any failure.
    SelfTest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Include a deliberately corrupted gradient (must be detected).
        #[arg(long)]
        inject_fault: bool,
    },
}

fn init_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        // ignore failure when a pool already exists (tests, repeat calls)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

fn parse_res(res: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = res.split('x').collect();
    if parts.len() != 2 {
        return Err(CliError::usage(format!(
            "bad resolution `{res}`; expected WxH like 64x64"
        )));
    }
    let w = parts[0]
        .parse()
        .map_err(|_| CliError::usage(format!("bad width in `{res}`")))?;
    let h = parts[1]
        .parse()
        .map_err(|_| CliError::usage(format!("bad height in `{res}`")))?;
    Ok((w, h))
}

fn load_config(path: Option<&Path>, overrides: &ConfigOverrides) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p).map_err(CliError::runtime)?,
        None => Config::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate().map_err(CliError::usage)?;
    Ok(cfg)
}

fn checkpoint_model(ckpt: &Path, data: Option<&Path>) -> Result<(Model, Checkpoint)> {
    let ck = Checkpoint::load(ckpt)?;
    let cfg: Config =
        serde_json::from_str(&ck.config_json).map_err(|e| CliError::runtime(e.to_string()))?;
    let rest = match data {
        Some(d) => SkeletonRest::load(&d.join("skeleton.txt"))?,
        None => SkeletonRest::default_skeleton(),
    };
    let model = Model::new(cfg, rest).map_err(|e| CliError::runtime(e.to_string()))?;
    Ok((model, ck))
}

pub fn run(args: CliArgs) -> Result<()> {
    match args.command {
        Command::MakeData {
            out,
            poses,
            cameras,
            res,
            seed,
            novel_cameras,
            novel_poses,
            force,
        } => {
            let (width, height) = parse_res(&res)?;
            if out.exists() && std::fs::read_dir(&out)?.next().is_some() && !force {
                return Err(CliError::runtime(format!(
                    "output directory {} is not empty (use --force to overwrite)",
                    out.display()
                )));
            }
            let ds = make_dataset(
                &out,
                &MakeDatasetOptions {
                    n_poses: poses,
                    n_cameras: cameras,
                    width,
                    height,
                    seed,
                    n_novel_cameras: novel_cameras,
                    n_novel_poses: novel_poses,
                },
            )?;
            println!(
                "dataset at {}: {} train frames, {} novel-view, {} novel-pose",
                out.display(),
                ds.splits.train.len(),
                ds.splits.novel_view.len(),
                ds.splits.novel_pose.len()
            );
            Ok(())
        }

        Command::Train {
            data,
            config,
            out,
            resume,
            metrics,
            stop_after,
            threads,
            log_every,
            overrides,
        } => {
            init_threads(threads);
            let dataset = Dataset::load(&data)?;
            let (cfg, resume_ck) = match resume {
                Some(path) => {
                    let ck = Checkpoint::load(&path)?;
                    let mut cfg: Config = serde_json::from_str(&ck.config_json)
                        .map_err(|e| CliError::runtime(e.to_string()))?;
                    overrides.apply(&mut cfg);
                    (cfg, Some(ck))
                }
                None => (load_config(config.as_deref(), &overrides)?, None),
            };
            let mut progress = |s: &crate::train::StepStats| {
                if log_every > 0 && (s.step % log_every == 0) {
                    println!(
                        "step {:>7}  l_p {:.5}  l_v {:.4}  l_s {:.5}  lr {:.2e}  {:.0}s",
                        s.step, s.l_p, s.l_v, s.l_s, s.lr, s.wall_seconds
                    );
                }
            };
            let result = train_until(
                &dataset,
                &cfg,
                resume_ck,
                metrics.as_deref(),
                Some(&mut progress),
                stop_after,
            )?;
            result.checkpoint.save(&out)?;
            println!(
                "checkpoint ({} steps, {} parameters) -> {}",
                result.checkpoint.step,
                result.checkpoint.params.num_scalars(),
                out.display()
            );
            Ok(())
        }

        Command::Render {
            ckpt,
            data,
            split,
            pose,
            camera,
            out,
            seed,
            threads,
            render_chunk,
        } => {
            init_threads(threads);
            let (mut model, ck) = checkpoint_model(&ckpt, data.as_deref())?;
            if let Some(c) = render_chunk {
                model.cfg.render_chunk = c;
            }
            std::fs::create_dir_all(&out)?;
            let frames: Vec<(String, Pose, Camera)> = match (&split, &pose, &camera) {
                (Some(name), None, None) => {
                    let d = data
                        .as_deref()
                        .ok_or_else(|| CliError::usage("--split requires --data"))?;
                    let ds = Dataset::load(d)?;
                    let list = ds
                        .splits
                        .get(name)
                        .ok_or_else(|| CliError::runtime(format!("unknown split `{name}`")))?;
                    list.iter()
                        .map(|&(p, c)| {
                            (
                                Dataset::frame_stem(p, c),
                                ds.poses[p].clone(),
                                ds.cameras[c].clone(),
                            )
                        })
                        .collect()
                }
                (None, Some(pp), Some(cp)) => {
                    let pose: Pose = serde_json::from_str(&std::fs::read_to_string(pp)?)
                        .map_err(|e| CliError::runtime(format!("pose file: {e}")))?;
                    let camera: Camera = serde_json::from_str(&std::fs::read_to_string(cp)?)
                        .map_err(|e| CliError::runtime(format!("camera file: {e}")))?;
                    vec![("frame".to_string(), pose, camera)]
                }
                _ => {
                    return Err(CliError::usage(
                        "render needs either --split NAME (with --data) or --pose FILE --camera FILE",
                    ))
                }
            };
            for (stem, pose, camera) in frames {
                let (img, alpha) = model.render_image(&ck.params, &pose, &camera, seed)?;
                img.save_ppm(&out.join(format!("{stem}.ppm")))?;
                img.save_png(&out.join(format!("{stem}.png")))?;
                alpha.save_pgm(&out.join(format!("{stem}_alpha.pgm")))?;
            }
            println!("renders -> {}", out.display());
            Ok(())
        }

        Command::Eval {
            ckpt,
            data,
            split,
            out,
            threads,
        } => {
            init_threads(threads);
            let (model, ck) = checkpoint_model(&ckpt, Some(&data))?;
            let dataset = Dataset::load(&data)?;
            let report = eval_split(&model, &ck.params, &dataset, &split)?;
            report.write_csv(&out)?;
            println!(
                "{}: mean PSNR {:.3} dB, mean SSIM {:.4} over {} frames -> {}",
                split,
                report.mean_psnr,
                report.mean_ssim,
                report.frames.len(),
                out.display()
            );
            Ok(())
        }

        Command::Ablate {
            data,
            grid,
            out,
            config,
            threads,
            overrides,
        } => {
            init_threads(threads);
            let dataset = Dataset::load(&data)?;
            let base = load_config(config.as_deref(), &overrides)?;
            let variants: Vec<(String, Config)> = match grid.as_str() {
                "aggregation" => [
                    AggregationStrategy::Softmax,
                    AggregationStrategy::SoftmaxOob,
                    AggregationStrategy::SumOob,
                    AggregationStrategy::SigmoidOob,
                    AggregationStrategy::SoftSoftmax,
                ]
                .into_iter()
                .map(|s| {
                    let mut c = base.clone();
                    c.strategy = s;
                    (s.name().to_string(), c)
                })
                .collect(),
                "volume-type" => [VolumeType::Factorized, VolumeType::Dense]
                    .into_iter()
                    .map(|v| {
                        let mut c = base.clone();
                        c.volume_type = v;
                        (v.to_string(), c)
                    })
                    .collect(),
                "modules" => {
                    let mut list = Vec::new();
                    for (name, variant, strategy) in [
                        ("full", ModelVariant::Full, base.strategy),
                        ("no-volume", ModelVariant::NoVolume, base.strategy),
                        ("no-gnn", ModelVariant::NoGnn, base.strategy),
                        (
                            "no-aggregation",
                            ModelVariant::Full,
                            AggregationStrategy::Concat,
                        ),
                    ] {
                        let mut c = base.clone();
                        c.variant = variant;
                        c.strategy = strategy;
                        list.push((name.to_string(), c));
                    }
                    list
                }
                other => {
                    return Err(CliError::usage(format!(
                        "unknown grid `{other}` (aggregation | volume-type | modules)"
                    )))
                }
            };
            std::fs::create_dir_all(&out)?;
            let mut rows = Vec::new();
            for (name, cfg) in variants {
                println!("== ablate variant {name} ({} steps)", cfg.steps);
                let result = train_until(&dataset, &cfg, None, None, None, None)?;
                let ck_path = out.join(format!("{name}.ck"));
                result.checkpoint.save(&ck_path)?;
                let model = Model::new(cfg.clone(), dataset.rest.clone())
                    .map_err(|e| CliError::runtime(e.to_string()))?;
                let np = eval_split(&model, &result.checkpoint.params, &dataset, "novel-pose")?;
                let nv = eval_split(&model, &result.checkpoint.params, &dataset, "novel-view")?;
                println!(
                    "   novel-pose PSNR {:.3} SSIM {:.4} | novel-view PSNR {:.3} SSIM {:.4}",
                    np.mean_psnr, np.mean_ssim, nv.mean_psnr, nv.mean_ssim
                );
                rows.push(format!(
                    "{name},{:.6},{:.6},{:.6},{:.6}",
                    np.mean_psnr, np.mean_ssim, nv.mean_psnr, nv.mean_ssim
                ));
            }
            let csv = format!(
                "variant,novel_pose_psnr,novel_pose_ssim,novel_view_psnr,novel_view_ssim\n{}\n",
                rows.join("\n")
            );
            std::fs::write(out.join("comparison.csv"), csv)?;
            println!("comparison -> {}", out.join("comparison.csv").display());
            Ok(())
        }

        Command::ExtractMesh {
            ckpt,
            pose,
            res,
            iso,
            out,
            data,
            threads,
        } => {
            init_threads(threads);
            if res < 2 {
                return Err(CliError::usage("--res must be at least 2"));
            }
            let (model, ck) = checkpoint_model(&ckpt, data.as_deref())?;
            let pose: Pose = serde_json::from_str(&std::fs::read_to_string(&pose)?)
                .map_err(|e| CliError::runtime(format!("pose file: {e}")))?;
            let (lo, hi) = model
                .scene_bounds(&pose)
                .map_err(|e| CliError::runtime(e.to_string()))?;
            let grid = density_grid(&model, &ck.params, &pose, lo, hi, res)
                .map_err(|e| CliError::runtime(e.to_string()))?;
            let mesh = marching_cubes(&grid, iso);
            if mesh.is_empty() {
                eprintln!("warning: iso {iso} produced an empty mesh");
            }
            mesh.write_obj(&out)?;
            println!(
                "{} vertices, {} triangles -> {}",
                mesh.vertices.len(),
                mesh.triangles.len(),
                out.display()
            );
            Ok(())
        }

        Command::SelfTest { seed, inject_fault } => {
            let (results, pass) = run_all(seed, inject_fault);
            println!("{:<38} {:>12} {:>9}  verdict", "check", "max err", "tol");
            for r in &results {
                println!(
                    "{:<38} {:>12.3e} {:>9.0e}  {}",
                    r.name,
                    r.max_err,
                    r.tol,
                    if r.pass() { "pass" } else { "FAIL" }
                );
            }
            if pass {
                println!("self-test passed ({} checks)", results.len());
                Ok(())
            } else {
                Err(CliError::runtime("self-test failed"))
            }
        }
    }
}
