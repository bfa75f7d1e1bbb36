//! The assembled body model: parameter layout for every variant, and the
//! batched differentiable pipeline from world-space samples to composited
//! pixels.
//!
//! Per pose: forward kinematics (constant in training; poses are data) and
//! one pose-encoder pass. Per sample point: bone-local coordinates, the
//! in-bound bone set, windowed feature retrieval, aggregation, the neural
//! field, and emission-absorption compositing. Everything differentiable
//! runs on one tape over sparse (point, bone) pairs; points inside no
//! volume never reach the field and contribute zero density.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::aggregation::{
    aggregate_pairs, pair_weights, soft_softmax_loss_var, AggregationStrategy, Aggregator, PairSet,
};
use crate::config::{Config, ModelVariant, VolumeType};
use crate::field::{encode_view, view_enc_dim, NeuralField};
use crate::gnn::{adjacency_rows, normalized_adjacency, pose_node_features, PoseEncoder};
use crate::image_io::{GreyBuf, ImageBuf};
use crate::kinematics::{
    add3, forward_kinematics, pose_bounds, scale3, BoneTransformSet, KinematicsError, Pose,
    SkeletonRest, Vec3, NUM_BONES,
};
use crate::params::{Init, LiftedParams, ParamStore};
use crate::renderer::{
    composite_var, deltas, gen_rays, ray_box_clip, stratified_samples, Camera, RayBatch,
    RenderError,
};
use crate::tape::{concat_cols, concat_rows, Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("config: {0}")]
    Config(String),
}

type Result<T> = std::result::Result<T, ModelError>;

/// Occupancy threshold for the soft-softmax target: `l = 1` when
/// `T * sigma` clears this (absorbs float noise around "> 0").
pub const OCCUPANCY_EPS: f64 = 1e-6;

pub struct Model {
    pub cfg: Config,
    pub rest: SkeletonRest,
    pub norm_adj: Tensor,
    pub encoder: Option<PoseEncoder>,
    pub aggregator: Option<Aggregator>,
    pub field: NeuralField,
    /// Initial (and, for `no-volume`, permanent) per-bone half-extents.
    pub base_extents: Vec<[f64; 3]>,
}

/// World-space samples of a ray bundle, flattened ray-major.
pub struct SampleBatch {
    pub n_rays: usize,
    pub q: usize,
    pub points: Vec<Vec3>,
    /// Encoded view direction per sample, `[n, enc]`.
    pub view_enc: Tensor,
    pub deltas: Vec<f64>,
}

/// Tape handles produced by one forward pass over a sample batch.
pub struct ForwardOut<'t> {
    /// `[n_rays, 3]` background-blended colors.
    pub rgb: Var<'t>,
    /// `[n_rays, 1]` accumulated alpha.
    pub alpha: Var<'t>,
    /// Soft-softmax constraint (summed over active points).
    pub ls: Option<Var<'t>>,
    /// Sum over bones of the extent product (the volume loss).
    pub volume_loss: Option<Var<'t>>,
    pub n_active: usize,
    pub n_pairs: usize,
    /// Per-active-point in-bound weight sums (value snapshot).
    pub weight_sums: Option<Tensor>,
    /// Sample index of each active point.
    pub active_samples: Vec<usize>,
    /// Occupancy targets used for the constraint (value snapshot).
    pub occupancy: Option<Tensor>,
}

enum BoneVolume<'t> {
    Factorized([Var<'t>; 3]),
    Dense(Var<'t>),
    FeatureVec(Var<'t>),
}

impl Model {
    pub fn new(cfg: Config, rest: SkeletonRest) -> Result<Model> {
        cfg.validate().map_err(ModelError::Config)?;
        let norm_adj = normalized_adjacency(&adjacency_rows(rest.adjacency()));
        let encoder = match cfg.variant {
            ModelVariant::NoGnn => None,
            _ => Some(PoseEncoder::new(
                "gnn",
                NUM_BONES,
                6,
                cfg.gnn_hidden,
                cfg.gnn_out_dim(),
            )),
        };
        let aggregator = if cfg.strategy == AggregationStrategy::Concat {
            None
        } else {
            Some(Aggregator::new(cfg.agg_in_dim(), cfg.agg_graph_layer))
        };
        let field = NeuralField::new(cfg.field_in_dim(), cfg.field_width);
        let base_extents = (0..NUM_BONES)
            .map(|i| {
                let l = rest.bone_length[i];
                [l + 0.10, 0.17, 0.17]
            })
            .collect();
        Ok(Model {
            cfg,
            rest,
            norm_adj,
            encoder,
            aggregator,
            field,
            base_extents,
        })
    }

    /// Fresh parameters, deterministic in the seed.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        if let Some(enc) = &self.encoder {
            enc.init(&mut store, &mut init);
        }
        if self.cfg.variant == ModelVariant::NoGnn {
            for i in 0..NUM_BONES {
                match self.cfg.volume_type {
                    VolumeType::Factorized => {
                        for axis in ["x", "y", "z"] {
                            store.insert(
                                &format!("vol.bone{i}.{axis}"),
                                init.uniform(&[self.cfg.h, self.cfg.m], -0.1, 0.1),
                            );
                        }
                    }
                    VolumeType::Dense => {
                        let md = self.cfg.m_dense;
                        store.insert(
                            &format!("vol.bone{i}.grid"),
                            init.uniform(&[self.cfg.h, md * md * md], -0.1, 0.1),
                        );
                    }
                }
            }
        }
        if self.learnable_extents() {
            let mut data = Vec::with_capacity(NUM_BONES * 3);
            for e in &self.base_extents {
                data.extend(e.iter().map(|v| v.ln()));
            }
            store.insert("vol.logext", Tensor::new(&[NUM_BONES, 3], data).unwrap());
        }
        if let Some(agg) = &self.aggregator {
            agg.init(&mut store, &mut init);
        }
        self.field.init(&mut store, &mut init);
        store
    }

    pub fn learnable_extents(&self) -> bool {
        self.cfg.variant != ModelVariant::NoVolume
    }

    /// Per-bone volume variables plus extents for one pose.
    fn bone_volumes<'t>(
        &self,
        tape: &'t Tape,
        lifted: &LiftedParams<'t>,
        pose: &Pose,
    ) -> Result<(Vec<BoneVolume<'t>>, Option<Var<'t>>, Vec<[f64; 3]>)> {
        let cfg = &self.cfg;
        let mut vols = Vec::with_capacity(NUM_BONES);
        match cfg.variant {
            ModelVariant::NoGnn => {
                for i in 0..NUM_BONES {
                    match cfg.volume_type {
                        VolumeType::Factorized => vols.push(BoneVolume::Factorized([
                            lifted.var(&format!("vol.bone{i}.x")),
                            lifted.var(&format!("vol.bone{i}.y")),
                            lifted.var(&format!("vol.bone{i}.z")),
                        ])),
                        VolumeType::Dense => {
                            vols.push(BoneVolume::Dense(lifted.var(&format!("vol.bone{i}.grid"))))
                        }
                    }
                }
            }
            _ => {
                let enc = self.encoder.as_ref().expect("encoder present");
                let feats = tape.constant(pose_node_features(pose));
                let heads = enc
                    .encode(tape, lifted, feats, &self.norm_adj)
                    .map_err(ModelError::Tensor)?;
                for head in heads {
                    match (cfg.variant, cfg.volume_type) {
                        (ModelVariant::NoVolume, _) => vols.push(BoneVolume::FeatureVec(head)),
                        (_, VolumeType::Factorized) => {
                            let block = head.reshape(&[3 * cfg.h, cfg.m])?;
                            vols.push(BoneVolume::Factorized([
                                block.slice_rows(0, cfg.h)?,
                                block.slice_rows(cfg.h, 2 * cfg.h)?,
                                block.slice_rows(2 * cfg.h, 3 * cfg.h)?,
                            ]));
                        }
                        (_, VolumeType::Dense) => {
                            let md = cfg.m_dense;
                            vols.push(BoneVolume::Dense(head.reshape(&[cfg.h, md * md * md])?));
                        }
                    }
                }
            }
        }
        let (ext_var, ext_vals) = if self.learnable_extents() {
            let ext = lifted.var("vol.logext").exp();
            let vals = ext.to_tensor();
            let per_bone = (0..NUM_BONES)
                .map(|i| [vals.get2(i, 0), vals.get2(i, 1), vals.get2(i, 2)])
                .collect();
            (Some(ext), per_bone)
        } else {
            (None, self.base_extents.clone())
        };
        Ok((vols, ext_var, ext_vals))
    }

    /// Stage II over a point set: in-bound pair structure, the per-point
    /// field input, and (for weighted strategies) the pair weights.
    #[allow(clippy::type_complexity)]
    fn point_features<'t>(
        &self,
        tape: &'t Tape,
        lifted: &LiftedParams<'t>,
        transforms: &BoneTransformSet,
        vols: &[BoneVolume<'t>],
        ext_var: Option<Var<'t>>,
        ext_vals: &[[f64; 3]],
        points: &[Vec3],
    ) -> Result<Option<(PairSet, Var<'t>, Option<Var<'t>>, Vec<usize>)>> {
        let cfg = &self.cfg;
        // in-bound pass
        let mut bone_pts: Vec<Vec<usize>> = vec![Vec::new(); NUM_BONES];
        let mut bone_locals: Vec<Vec<f64>> = vec![Vec::new(); NUM_BONES];
        let mut active_mask = vec![false; points.len()];
        for i in 0..NUM_BONES {
            let wtb = &transforms.world_to_bone[i];
            let e = ext_vals[i];
            for (s, &p) in points.iter().enumerate() {
                let l = wtb.apply(p);
                if l[0].abs() <= e[0] && l[1].abs() <= e[1] && l[2].abs() <= e[2] {
                    bone_pts[i].push(s);
                    bone_locals[i].extend_from_slice(&l);
                    active_mask[s] = true;
                }
            }
        }
        let active_samples: Vec<usize> = (0..points.len()).filter(|&s| active_mask[s]).collect();
        if active_samples.is_empty() {
            return Ok(None);
        }
        let mut active_of = vec![usize::MAX; points.len()];
        for (a, &s) in active_samples.iter().enumerate() {
            active_of[s] = a;
        }

        // softmax needs every bone's logit per point: extend pair lists to
        // all (active point, bone) combinations, out-of-bound ones included
        // (their features interpolate to exact zeros)
        if cfg.strategy.needs_all_bones() {
            for i in 0..NUM_BONES {
                bone_pts[i].clear();
                bone_locals[i].clear();
                let wtb = &transforms.world_to_bone[i];
                for &s in &active_samples {
                    bone_pts[i].push(s);
                    bone_locals[i].extend_from_slice(&wtb.apply(points[s]));
                }
            }
        }

        let bone_active: Vec<Vec<usize>> = bone_pts
            .iter()
            .map(|pts| pts.iter().map(|&s| active_of[s]).collect())
            .collect();
        let pairs = PairSet::from_bone_lists(&bone_active, active_samples.len());

        // per-bone feature blocks in pair order
        let mut feat_blocks = Vec::new();
        let mut scaled_blocks = Vec::new();
        for i in 0..NUM_BONES {
            let k = bone_pts[i].len();
            if k == 0 {
                continue;
            }
            let local = tape.constant(Tensor::new(&[k, 3], bone_locals[i].clone())?);
            let ext_i = match ext_var {
                Some(ext) => ext.slice_rows(i, i + 1)?,
                None => tape.constant(Tensor::new(&[1, 3], ext_vals[i].to_vec())?),
            };
            let scaled = local.div_row(ext_i)?;
            let feats = match &vols[i] {
                BoneVolume::Factorized(axes) => {
                    crate::volume::windowed_features_var(tape, *axes, scaled)?
                }
                BoneVolume::Dense(grid) => {
                    let interp = Var::interp3d_from(*grid, scaled, cfg.m_dense)?;
                    interp.mul_col(crate::volume::window_var(scaled)?)?
                }
                BoneVolume::FeatureVec(f) => {
                    let ones = tape.constant(Tensor::filled(&[k, 1], 1.0));
                    ones.matmul(*f)?
                        .mul_col(crate::volume::window_var(scaled)?)?
                }
            };
            feat_blocks.push(feats);
            scaled_blocks.push(scaled);
        }
        let pair_feats = concat_rows(tape, &feat_blocks)?;
        let pair_scaled = concat_rows(tape, &scaled_blocks)?;

        let n_active = active_samples.len();
        let (field_in, weights) = if cfg.strategy == AggregationStrategy::Concat {
            // per-bone scatter into column blocks
            let d = cfg.feature_dim();
            let mut cols = Vec::with_capacity(NUM_BONES);
            for (i, &(start, end)) in pairs.bone_ranges.iter().enumerate() {
                if start == end {
                    cols.push(tape.constant(Tensor::zeros(&[n_active, d])));
                    continue;
                }
                let idx: Vec<usize> = pairs.point_of[start..end].to_vec();
                let block = pair_feats.slice_rows(start, end)?;
                cols.push(block.scatter_add_rows(std::rc::Rc::new(idx), n_active)?);
                let _ = i;
            }
            (concat_cols(tape, &cols)?, None)
        } else {
            let agg = self.aggregator.as_ref().expect("aggregator present");
            // sum-oob ignores logits entirely; skip the network
            let w = if cfg.strategy == AggregationStrategy::SumOob {
                pair_weights(tape, cfg.strategy, pair_feats, &pairs)?
            } else {
                let agg_in = match cfg.variant {
                    ModelVariant::NoVolume => pair_scaled,
                    _ => pair_feats,
                };
                let logits = agg.logits_pairs(tape, lifted, agg_in, &pairs, &self.norm_adj)?;
                pair_weights(tape, cfg.strategy, logits, &pairs)?
            };
            let hhat = aggregate_pairs(pair_feats, w, &pairs)?;
            let field_in = match cfg.variant {
                ModelVariant::NoVolume => {
                    let coords = aggregate_pairs(pair_scaled, w, &pairs)?;
                    concat_cols(tape, &[hhat, coords])?
                }
                _ => hhat,
            };
            (field_in, Some(w))
        };
        Ok(Some((pairs, field_in, weights, active_samples)))
    }

    /// Full differentiable forward over a sample batch.
    pub fn forward_samples<'t>(
        &self,
        tape: &'t Tape,
        lifted: &LiftedParams<'t>,
        pose: &Pose,
        batch: &SampleBatch,
    ) -> Result<ForwardOut<'t>> {
        let cfg = &self.cfg;
        let n = batch.points.len();
        assert_eq!(n, batch.n_rays * batch.q);
        let transforms = forward_kinematics(pose, &self.rest)?;
        let (vols, ext_var, ext_vals) = self.bone_volumes(tape, lifted, pose)?;

        let volume_loss = match ext_var {
            Some(ext) => {
                let px = ext.slice_cols(0, 1)?;
                let py = ext.slice_cols(1, 2)?;
                let pz = ext.slice_cols(2, 3)?;
                Some(px.mul(py)?.mul(pz)?.sum_all())
            }
            None => None,
        };

        let stage2 = self.point_features(
            tape,
            lifted,
            &transforms,
            &vols,
            ext_var,
            &ext_vals,
            &batch.points,
        )?;

        let bg = cfg.background.rgb();
        let bg_row = tape.constant(Tensor::new(&[1, 3], bg.to_vec())?);

        let Some((pairs, field_in, weights, active_samples)) = stage2 else {
            // nothing hit a volume: pure background
            let ones = tape.constant(Tensor::filled(&[batch.n_rays, 1], 1.0));
            let rgb = ones.matmul(bg_row)?;
            let alpha = tape.constant(Tensor::zeros(&[batch.n_rays, 1]));
            return Ok(ForwardOut {
                rgb,
                alpha,
                ls: None,
                volume_loss,
                n_active: 0,
                n_pairs: 0,
                weight_sums: None,
                active_samples: vec![],
                occupancy: None,
            });
        };

        // field evaluation on active points
        let n_active = active_samples.len();
        let mut enc_rows = Vec::with_capacity(n_active * view_enc_dim());
        for &s in &active_samples {
            let row_start = s * view_enc_dim();
            enc_rows.extend_from_slice(&batch.view_enc.data()[row_start..row_start + view_enc_dim()]);
        }
        let enc = tape.constant(Tensor::new(&[n_active, view_enc_dim()], enc_rows)?);
        let (sigma_a, color_a) = self.field.eval(tape, lifted, field_in, enc)?;

        // scatter to the dense ray/sample lattice and composite
        let idx = std::rc::Rc::new(active_samples.clone());
        let sigma = sigma_a.scatter_add_rows(idx.clone(), n)?;
        let color = color_a.scatter_add_rows(idx, n)?;
        let delta = tape.constant(Tensor::new(&[n, 1], batch.deltas.clone())?);
        let (rgb0, alpha, _sample_w) = composite_var(sigma, color, delta, batch.q)?;
        let rgb = rgb0.add(alpha.neg().add_const(1.0).matmul(bg_row)?)?;

        // soft-softmax constraint with a stop-gradient occupancy target
        let (ls, weight_sums, occupancy) = if cfg.strategy.uses_constraint() {
            let w = weights.expect("weighted strategy");
            let sigma_vals = sigma.to_tensor();
            let trans = per_sample_transmittance(&sigma_vals, &batch.deltas, batch.q);
            let target: Vec<f64> = active_samples
                .iter()
                .map(|&s| {
                    if trans[s] * sigma_vals.data()[s] > OCCUPANCY_EPS {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let target_t = Tensor::new(&[n_active, 1], target)?;
            let ls = soft_softmax_loss_var(tape, w, &pairs, &target_t)?;
            let sums = crate::aggregation::weight_sums_per_point(w, &pairs)?.to_tensor();
            (Some(ls), Some(sums), Some(target_t))
        } else {
            (None, None, None)
        };

        Ok(ForwardOut {
            rgb,
            alpha,
            ls,
            volume_loss,
            n_active,
            n_pairs: pairs.len(),
            weight_sums,
            active_samples,
            occupancy,
        })
    }

    /// Density-only forward over arbitrary world points (geometry tools).
    pub fn density_at(
        &self,
        params: &ParamStore,
        pose: &Pose,
        points: &[Vec3],
    ) -> Result<Vec<f64>> {
        let transforms = forward_kinematics(pose, &self.rest)?;
        let mut out = vec![0.0; points.len()];
        for chunk_start in (0..points.len()).step_by(8192) {
            let chunk = &points[chunk_start..(chunk_start + 8192).min(points.len())];
            let tape = Tape::new();
            let lifted = params.lift(&tape);
            let (vols, ext_var, ext_vals) = self.bone_volumes(&tape, &lifted, pose)?;
            let Some((_, field_in, _, active_samples)) = self.point_features(
                &tape,
                &lifted,
                &transforms,
                &vols,
                ext_var,
                &ext_vals,
                chunk,
            )?
            else {
                continue;
            };
            let sigma = self.field.eval_density(&tape, &lifted, field_in)?;
            let vals = sigma.to_tensor();
            for (a, &s) in active_samples.iter().enumerate() {
                out[chunk_start + s] = vals.data()[a];
            }
        }
        Ok(out)
    }

    /// Sampling bounds for a pose: bone bounding box dilated by the config.
    pub fn scene_bounds(&self, pose: &Pose) -> Result<(Vec3, Vec3)> {
        let transforms = forward_kinematics(pose, &self.rest)?;
        let (lo, hi) = pose_bounds(&transforms, &self.rest);
        let d = self.cfg.bbox_dilation;
        Ok((
            [lo[0] - d, lo[1] - d, lo[2] - d],
            [hi[0] + d, hi[1] + d, hi[2] + d],
        ))
    }

    /// Build the flattened sample batch for a set of rays. Depth jitter uses
    /// one rng stream per ray keyed by its pixel index, so results do not
    /// depend on ray order or scheduling.
    pub fn sample_rays(
        &self,
        rays: &RayBatch,
        jitter_seed: Option<u64>,
    ) -> SampleBatch {
        let q = self.cfg.q;
        let n = rays.len() * q;
        let mut points = Vec::with_capacity(n);
        let mut enc = Vec::with_capacity(n * view_enc_dim());
        let mut ds = Vec::with_capacity(n);
        for r in 0..rays.len() {
            let depths = match jitter_seed {
                Some(seed) => {
                    let key = ray_stream_key(seed, rays.pixels[r]);
                    let mut rng = ChaCha8Rng::seed_from_u64(key);
                    stratified_samples(rays.near[r], rays.far[r], q, Some(&mut rng))
                }
                None => stratified_samples(rays.near[r], rays.far[r], q, None),
            };
            let dq = deltas(&depths, rays.far[r]);
            let enc_row = encode_view(rays.dirs[r]);
            for (t, d) in depths.iter().zip(dq) {
                points.push(add3(rays.origins[r], scale3(rays.dirs[r], *t)));
                enc.extend_from_slice(&enc_row);
                ds.push(d);
            }
        }
        SampleBatch {
            n_rays: rays.len(),
            q,
            points,
            view_enc: Tensor::new(&[n, view_enc_dim()], enc).unwrap(),
            deltas: ds,
        }
    }

    /// Render a full image (inference path: forward only, chunked rays).
    /// Rays missing the dilated bone box are background immediately.
    pub fn render_image(
        &self,
        params: &ParamStore,
        pose: &Pose,
        camera: &Camera,
        jitter_seed: Option<u64>,
    ) -> Result<(ImageBuf, GreyBuf)> {
        camera.validate()?;
        let (lo, hi) = self.scene_bounds(pose)?;
        let bg = self.cfg.background.rgb();
        let mut img = ImageBuf::new(camera.width, camera.height);
        let mut alpha_map = GreyBuf::new(camera.width, camera.height);

        // bucket pixels into box-hitting rays vs immediate background
        let mut hit_pixels = Vec::new();
        let mut hit_ranges = Vec::new();
        for v in 0..camera.height as u32 {
            for u in 0..camera.width as u32 {
                let (o, d) = camera.ray(u as f64 + 0.5, v as f64 + 0.5)?;
                match ray_box_clip(o, d, lo, hi) {
                    Some((t0, t1)) if t1 > t0 => {
                        hit_pixels.push((u, v));
                        hit_ranges.push((t0.max(1e-4), t1));
                    }
                    _ => img.set(u as usize, v as usize, bg),
                }
            }
        }

        for chunk_start in (0..hit_pixels.len()).step_by(self.cfg.render_chunk) {
            let end = (chunk_start + self.cfg.render_chunk).min(hit_pixels.len());
            let pix = &hit_pixels[chunk_start..end];
            let mut rays = gen_rays(camera, pix)?;
            for (i, &(t0, t1)) in hit_ranges[chunk_start..end].iter().enumerate() {
                rays.near[i] = t0;
                rays.far[i] = t1;
            }
            let batch = self.sample_rays(&rays, jitter_seed);
            let tape = Tape::new();
            let lifted = params.lift(&tape);
            let out = self.forward_samples(&tape, &lifted, pose, &batch)?;
            let rgb = out.rgb.to_tensor();
            let alpha = out.alpha.to_tensor();
            for (i, &(u, v)) in pix.iter().enumerate() {
                img.set(
                    u as usize,
                    v as usize,
                    [rgb.get2(i, 0), rgb.get2(i, 1), rgb.get2(i, 2)],
                );
                alpha_map.set(u as usize, v as usize, alpha.get2(i, 0));
            }
        }
        Ok((img, alpha_map))
    }
}

/// Transmittance T ahead of each sample, from dense per-sample densities.
pub fn per_sample_transmittance(sigma: &Tensor, deltas: &[f64], q: usize) -> Vec<f64> {
    let n = sigma.numel();
    let mut out = vec![1.0; n];
    for ray in 0..n / q {
        let mut acc = 0.0_f64;
        for s in 0..q {
            let i = ray * q + s;
            out[i] = (-acc).exp();
            acc += sigma.data()[i] * deltas[i];
        }
    }
    out
}

/// Deterministic per-ray stream key from a seed and pixel coordinates
/// (splitmix-style diffusion).
pub fn ray_stream_key(seed: u64, pixel: (u32, u32)) -> u64 {
    let mut z = seed
        .wrapping_add((pixel.0 as u64) << 32)
        .wrapping_add(pixel.1 as u64)
        .wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
