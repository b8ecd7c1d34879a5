use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assign::AssignmentConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::losses::LossWeights;
use crate::netcore::FeatureExtractorConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneGenConfig {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    /// The ground plane sits at `z_range[0]`.
    pub z_range: [f64; 2],
    pub min_objects: usize,
    pub max_objects: usize,
    /// Sampling weights for car, pedestrian, cyclist.
    pub class_weights: [f64; 3],
    /// Relative standard deviation of object dimensions.
    pub dim_jitter: [f64; 3],
    /// Objects closer than this to the sensor are not placed.
    pub min_range: f64,
    /// Template points per class before visibility filtering.
    pub template_points: [usize; 3],
    /// Keep probability is `min(1, (decay_d0 / d)²)`.
    pub decay_d0: f64,
    pub occlusion_prob: f64,
    /// Lower bound on the fraction an occluded object keeps.
    pub occlusion_keep: f64,
    /// Ground returns per square meter before distance decay.
    pub ground_density: f64,
    pub max_poles: usize,
    pub pole_points: usize,
    pub noise_sigma: f64,
    /// Objects with fewer surviving points are dropped.
    pub min_points: usize,
    pub max_attempts: usize,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            x_range: [0.0, 40.0],
            y_range: [-20.0, 20.0],
            z_range: [-1.5, 1.5],
            min_objects: 1,
            max_objects: 8,
            class_weights: [0.5, 0.25, 0.25],
            dim_jitter: [0.05, 0.05, 0.05],
            min_range: 4.0,
            template_points: [1024, 384, 512],
            decay_d0: 10.0,
            occlusion_prob: 0.3,
            occlusion_keep: 0.5,
            ground_density: 1.0,
            max_poles: 3,
            pole_points: 200,
            noise_sigma: 0.02,
            min_points: 5,
            max_attempts: 200,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [self.x_range, self.y_range, self.z_range];
        if ranges.iter().any(|r| !(r[0] < r[1]) || !r[0].is_finite() || !r[1].is_finite()) {
            return Err(Error::Config(format!("degenerate scene extents: {ranges:?}")));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects exceeds max_objects".into()));
        }
        if self.class_weights.iter().any(|&w| w < 0.0) || self.class_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("class weights must be non-negative with a positive sum".into()));
        }
        if !(self.decay_d0 > 0.0 && self.ground_density >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::Config("densities and noise must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) || !(0.0..=1.0).contains(&self.occlusion_keep) {
            return Err(Error::Config("occlusion settings must lie in [0, 1]".into()));
        }
        if self.template_points.iter().any(|&k| k < crate::templates::MIN_TEMPLATE_POINTS) {
            return Err(Error::Config("template_points below the template minimum".into()));
        }
        Ok(())
    }

    pub fn ground_z(&self) -> f64 {
        self.z_range[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RpnConfig {
    pub cell_size: f64,
    pub hidden: usize,
    pub anchor_yaws: [f64; 2],
    /// Initial foreground probability encoded in the classifier bias.
    pub prior: f64,
    pub pre_nms_top: usize,
    pub train_nms: f64,
    pub train_keep: usize,
}

impl Default for RpnConfig {
    fn default() -> Self {
        RpnConfig {
            cell_size: 0.4,
            hidden: 64,
            anchor_yaws: [0.0, std::f64::consts::FRAC_PI_2],
            prior: 0.01,
            pre_nms_top: 512,
            train_nms: 0.8,
            train_keep: 128,
        }
    }
}

impl RpnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0 && self.prior > 0.0 && self.prior < 1.0 && self.hidden > 0) {
            return Err(Error::Config("rpn needs positive cell size and hidden width, prior in (0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub pool_margin: f64,
    /// Pooled points beyond this count are strided down.
    pub max_points: usize,
    pub encoder_dims: Vec<usize>,
    pub head_hidden: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub tau: f64,
    pub mu: f64,
    pub extractor: FeatureExtractorConfig,
    pub template_seed: u64,
    pub template_points: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            pool_margin: 1.2,
            max_points: 128,
            encoder_dims: vec![32, 64],
            head_hidden: 32,
            proj_hidden: 64,
            proj_dim: 128,
            tau: 0.1,
            mu: 0.55,
            extractor: FeatureExtractorConfig::default(),
            template_seed: 0,
            template_points: crate::templates::DEFAULT_TEMPLATE_POINTS,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        self.extractor.validate()?;
        if self.encoder_dims.is_empty() || self.max_points == 0 || self.pool_margin < 1.0 {
            return Err(Error::Config("refine needs encoder layers, max_points > 0, margin >= 1".into()));
        }
        if !(self.tau > 0.0 && self.mu > 0.0 && self.mu < 1.0) {
            return Err(Error::Config("tau must be positive and mu in (0,1)".into()));
        }
        if self.template_points < self.extractor.m {
            return Err(Error::Config("template_points must be at least extractor.m".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.encoder_dims.last().expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub num_scenes: usize,
    pub scene_seed: u64,
    pub seed: u64,
    pub lr: f64,
    pub weights: LossWeights,
    pub assign: AssignmentConfig,
    /// Noisy copies of each ground truth appended to the training proposals.
    pub gt_proposal_copies: usize,
    pub jitter_xyz: f64,
    pub jitter_theta: f64,
    /// Train the refinement stage on jittered ground truths only.
    pub jittered_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            num_scenes: 100,
            scene_seed: 1,
            seed: 0,
            lr: 1e-3,
            weights: LossWeights::default(),
            assign: AssignmentConfig::default(),
            gt_proposal_copies: 4,
            jitter_xyz: 0.1,
            jitter_theta: 0.1,
            jittered_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.assign.validate()?;
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.jittered_only && self.gt_proposal_copies == 0 {
            return Err(Error::Config("jittered_only needs gt_proposal_copies > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub nms_threshold: f64,
    pub keep: usize,
    pub final_nms: f64,
    pub score_threshold: f64,
    pub eval: EvalConfig,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            nms_threshold: 0.7,
            keep: 100,
            final_nms: 0.1,
            score_threshold: 0.05,
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub use_tafe: bool,
    pub use_pscl: bool,
}

impl AblationFlags {
    pub const BASELINE: AblationFlags = AblationFlags { use_tafe: false, use_pscl: false };
    pub const FULL: AblationFlags = AblationFlags { use_tafe: true, use_pscl: true };

    /// The four variants A (neither), B (TAFE), C (PSCL), D (both).
    pub fn grid() -> [(char, AblationFlags); 4] {
        [
            ('A', AblationFlags::BASELINE),
            ('B', AblationFlags { use_tafe: true, use_pscl: false }),
            ('C', AblationFlags { use_tafe: false, use_pscl: true }),
            ('D', AblationFlags::FULL),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub use_tafe: bool,
    pub use_pscl: bool,
    pub eval_scenes: usize,
    pub eval_scene_seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            use_tafe: true,
            use_pscl: true,
            eval_scenes: 200,
            eval_scene_seed: 1_000_000,
        }
    }
}

impl AblationConfig {
    pub fn flags(&self) -> AblationFlags {
        AblationFlags {
            use_tafe: self.use_tafe,
            use_pscl: self.use_pscl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub scene: SceneGenConfig,
    pub rpn: RpnConfig,
    pub refine: RefineConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub ablation: AblationConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.rpn.validate()?;
        self.refine.validate()?;
        self.train.validate()?;
        self.infer.eval.validate()
    }

    pub fn from_json(text: &str) -> Result<Config> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
