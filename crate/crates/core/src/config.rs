//! Hyperparameters of one pipeline run.

use alloc::format;

use crate::depth::{DdvmConfig, DepthBinSpec, DepthStrategy};
use crate::error::{config_err, Result};
use crate::fusion::{FusionConfig, FusionStrategy};
use crate::geo::{GcaConfig, DEFAULT_FULL_CAP};
use crate::losses::LossWeights;
use crate::scene::{CameraRig, DisparityBins, GridSpec, SceneSpec, SynthConfig};
use crate::view::RefineConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub dims: [usize; 3],
    pub voxel_size_m: f64,
    /// Label count including the empty class.
    pub num_classes: usize,
    /// Feature width `C` shared by every stage.
    pub channels: usize,
    pub rig: CameraRig,
    pub disp_bins: usize,
    /// Depth range covered by the disparity bins.
    pub disp_depth_min: f64,
    pub disp_depth_max: f64,
    pub depth_bins: DepthBinSpec,

    pub gca_heads: usize,
    pub gca_blocks: usize,
    pub gca_axial: bool,
    pub gca_alpha_init: f64,
    pub gca_renormalize: bool,
    pub gca_full_cap: usize,

    pub ddvm_blocks: usize,
    pub ddvm_phi_channels: usize,

    pub refine_points: usize,
    pub refine_max_offset: f64,
    pub refine_self_round: bool,

    pub concat_joint: bool,

    pub depth_strategy: DepthStrategy,
    pub fusion_strategy: FusionStrategy,
    pub loss: LossWeights,

    pub seed: u64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub steps: usize,
    pub learning_rate: f64,

    pub feature_noise: f64,
    pub cost_noise: f64,
    pub cost_sharpness: f64,
    pub mark_unobservable: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dims: [32, 32, 8],
            voxel_size_m: 0.25,
            num_classes: 5,
            channels: 16,
            rig: CameraRig::default(),
            disp_bins: 12,
            disp_depth_min: 1.0,
            disp_depth_max: 8.0,
            depth_bins: DepthBinSpec::uniform(16, 1.0, 8.0),
            gca_heads: 2,
            gca_blocks: 2,
            gca_axial: true,
            gca_alpha_init: 0.5,
            gca_renormalize: false,
            gca_full_cap: DEFAULT_FULL_CAP,
            ddvm_blocks: 2,
            ddvm_phi_channels: 8,
            refine_points: 4,
            refine_max_offset: 2.0,
            refine_self_round: true,
            concat_joint: false,
            depth_strategy: DepthStrategy::Ddvm,
            fusion_strategy: FusionStrategy::Aaf,
            loss: LossWeights::default(),
            seed: 0,
            train_scenes: 8,
            eval_scenes: 4,
            steps: 300,
            learning_rate: 1e-2,
            feature_noise: 0.1,
            cost_noise: 0.1,
            cost_sharpness: 4.0,
            mark_unobservable: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene_spec().validate()?;
        self.rig.validate()?;
        self.disparity_bins()?;
        self.depth_bins.validate()?;
        self.gca_config().validate()?;
        self.loss.validate()?;
        if self.channels < self.num_classes {
            return Err(config_err(format!(
                "feature width {} is smaller than num_classes {}",
                self.channels, self.num_classes
            )));
        }
        if self.disp_bins < 2 {
            return Err(config_err("at least two disparity bins are required"));
        }
        if self.ddvm_phi_channels == 0 || self.refine_points == 0 {
            return Err(config_err("ddvm_phi_channels and refine_points must be positive"));
        }
        if !(self.refine_max_offset >= 0.0 && self.refine_max_offset.is_finite()) {
            return Err(config_err("refine_max_offset must be a finite non-negative number"));
        }
        if self.train_scenes == 0 || self.eval_scenes == 0 {
            return Err(config_err("scene counts must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err("learning rate must be finite and non-negative"));
        }
        for (name, v) in [
            ("feature_noise", self.feature_noise),
            ("cost_noise", self.cost_noise),
            ("cost_sharpness", self.cost_sharpness),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            voxel_size_m: self.voxel_size_m,
            ..SceneSpec::new(self.dims, self.num_classes)
        }
    }

    pub fn grid_spec(&self) -> GridSpec {
        let s = self.scene_spec();
        GridSpec {
            dims: s.dims,
            origin_m: s.origin_m,
            voxel_size_m: s.voxel_size_m,
        }
    }

    pub fn disparity_bins(&self) -> Result<DisparityBins> {
        DisparityBins::from_depth_range(&self.rig, self.disp_depth_min, self.disp_depth_max, self.disp_bins)
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        Ok(SynthConfig {
            scene: self.scene_spec(),
            rig: self.rig,
            bins: self.disparity_bins()?,
            embed_dim: self.channels,
            feature_noise: self.feature_noise,
            cost_sharpness: self.cost_sharpness,
            cost_noise: self.cost_noise,
            mark_unobservable: self.mark_unobservable,
        })
    }

    pub fn gca_config(&self) -> GcaConfig {
        GcaConfig {
            num_blocks: self.gca_blocks,
            use_axial: self.gca_axial,
            alpha_init: self.gca_alpha_init,
            renormalize: self.gca_renormalize,
            full_cap: self.gca_full_cap,
            ..GcaConfig::new(self.channels, self.gca_heads)
        }
    }

    pub fn ddvm_config(&self) -> DdvmConfig {
        DdvmConfig {
            num_blocks: self.ddvm_blocks,
            phi_channels: self.ddvm_phi_channels,
            refine: self.depth_strategy != DepthStrategy::RefineOff,
            ..DdvmConfig::new(self.disp_bins, self.depth_bins.num_bins)
        }
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            channels: self.channels,
            num_points: self.refine_points,
            max_offset: self.refine_max_offset,
            self_round: self.refine_self_round,
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            channels: self.channels,
            concat_joint: self.concat_joint,
        }
    }
}
