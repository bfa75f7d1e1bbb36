//! One flat configuration document covering representation, rendering, and
//! training. Serialized as JSON (`data/config.schema.json` documents the
//! fields); every field has a default, so partial files work, and the CLI
//! exposes each as a `--key=value` override.

use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationStrategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    /// GNN-encoded factorized (or dense) volumes with learned aggregation.
    Full,
    /// GNN emits one feature vector per bone; aggregation weights come from
    /// bone-local coordinates; the field also sees aggregated coordinates.
    NoVolume,
    /// Per-bone volumes are free parameters, no pose conditioning.
    NoGnn,
}

impl std::str::FromStr for ModelVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(ModelVariant::Full),
            "no-volume" => Ok(ModelVariant::NoVolume),
            "no-gnn" => Ok(ModelVariant::NoGnn),
            other => Err(format!("unknown variant `{other}`")),
        }
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelVariant::Full => "full",
            ModelVariant::NoVolume => "no-volume",
            ModelVariant::NoGnn => "no-gnn",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VolumeType {
    Factorized,
    Dense,
}

impl std::str::FromStr for VolumeType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "factorized" => Ok(VolumeType::Factorized),
            "dense" => Ok(VolumeType::Dense),
            other => Err(format!("unknown volume type `{other}`")),
        }
    }
}

impl std::fmt::Display for VolumeType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VolumeType::Factorized => "factorized",
            VolumeType::Dense => "dense",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Background {
    White,
    Black,
}

impl Background {
    pub fn rgb(&self) -> [f64; 3] {
        match self {
            Background::White => [1.0; 3],
            Background::Black => [0.0; 3],
        }
    }
}

impl std::str::FromStr for Background {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "white" => Ok(Background::White),
            "black" => Ok(Background::Black),
            other => Err(format!("unknown background `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Config {
    // representation
    /// Feature channels per axis array.
    pub h: usize,
    /// Samples per axis array.
    pub m: usize,
    /// Grid resolution of the dense-volume ablation.
    pub m_dense: usize,
    pub gnn_hidden: usize,
    pub field_width: usize,
    pub strategy: AggregationStrategy,
    /// Keep the aggregation network's graph layer (drop it to make every
    /// logit depend on its own bone only).
    pub agg_graph_layer: bool,
    pub variant: ModelVariant,
    pub volume_type: VolumeType,

    // rendering
    /// Samples per ray.
    pub q: usize,
    /// Meters added around the posed bone bounding box for near/far.
    pub bbox_dilation: f64,
    pub background: Background,
    /// Rays per forward chunk when rendering full images.
    pub render_chunk: usize,

    // training
    pub steps: u64,
    pub rays_per_step: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub lambda_v: f64,
    pub lambda_s: f64,
    /// Fraction of ray samples drawn from the dilated foreground mask.
    pub mask_ratio: f64,
    /// Dilation radius (pixels) of the foreground sampling region.
    pub mask_dilation: usize,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            h: 8,
            m: 16,
            m_dense: 8,
            gnn_hidden: 32,
            field_width: 128,
            strategy: AggregationStrategy::SoftSoftmax,
            agg_graph_layer: true,
            variant: ModelVariant::Full,
            volume_type: VolumeType::Factorized,
            q: 64,
            bbox_dilation: 0.5,
            background: Background::White,
            render_chunk: 1024,
            steps: 20_000,
            rays_per_step: 1024,
            lr: 5e-4,
            lr_final: 5e-5,
            lambda_v: 1e-3,
            lambda_s: 1e-3,
            mask_ratio: 0.8,
            mask_dilation: 4,
            seed: 0,
        }
    }
}

impl Config {
    pub fn load(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("read config: {e}"))?;
        serde_json::from_str(&text).map_err(|e| format!("parse config: {e}"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Per-bone retrieved feature width.
    pub fn feature_dim(&self) -> usize {
        match (self.variant, self.volume_type) {
            (ModelVariant::NoVolume, _) => 3 * self.h,
            (_, VolumeType::Factorized) => 3 * self.h,
            (_, VolumeType::Dense) => self.h,
        }
    }

    /// Aggregation network input width.
    pub fn agg_in_dim(&self) -> usize {
        match self.variant {
            ModelVariant::NoVolume => 3,
            _ => self.feature_dim(),
        }
    }

    /// Neural field input width.
    pub fn field_in_dim(&self) -> usize {
        use crate::aggregation::AggregationStrategy::Concat;
        let d = self.feature_dim();
        match (self.strategy, self.variant) {
            (Concat, _) => crate::kinematics::NUM_BONES * d,
            (_, ModelVariant::NoVolume) => d + 3,
            _ => d,
        }
    }

    /// GNN head width per bone (absent for `no-gnn`).
    pub fn gnn_out_dim(&self) -> usize {
        match (self.variant, self.volume_type) {
            (ModelVariant::NoVolume, _) => 3 * self.h,
            (_, VolumeType::Factorized) => 3 * self.h * self.m,
            (_, VolumeType::Dense) => self.h * self.m_dense.pow(3),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.h == 0 || self.m < 2 || self.q == 0 {
            return Err("h >= 1, m >= 2, q >= 1 required".into());
        }
        if self.m_dense < 2 {
            return Err("m_dense >= 2 required".into());
        }
        if self.strategy == AggregationStrategy::Concat && self.variant == ModelVariant::NoVolume {
            return Err("concat strategy is not defined for the no-volume variant".into());
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err("mask_ratio must be in [0,1]".into());
        }
        if self.lr <= 0.0 || self.lr_final <= 0.0 {
            return Err("learning rates must be positive".into());
        }
        Ok(())
    }
}
