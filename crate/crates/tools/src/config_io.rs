//! Flat `key = value` configuration text with dotted section prefixes.
//!
//! Blank lines and `#` comments are ignored. Keys not present keep their
//! default value; unknown keys and malformed values are errors.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use ssc_core::config::PipelineConfig;
use ssc_core::depth::BinSpacing;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(#[from] ssc_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn spacing_name(s: BinSpacing) -> &'static str {
    match s {
        BinSpacing::Uniform => "uniform",
        BinSpacing::LinearIncreasing => "linear-increasing",
    }
}

fn num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: Display,
{
    v.parse().map_err(|e| format!("{v:?}: {e}"))
}

fn flag(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{v:?} is not true/false")),
    }
}

/// Every key with its current value, in a fixed order.
pub fn to_pairs(c: &PipelineConfig) -> Vec<(&'static str, String)> {
    let r = &c.rig;
    vec![
        ("grid.dims", format!("{},{},{}", c.dims[0], c.dims[1], c.dims[2])),
        ("grid.voxel_size_m", c.voxel_size_m.to_string()),
        ("grid.num_classes", c.num_classes.to_string()),
        ("model.channels", c.channels.to_string()),
        ("camera.fx", r.fx.to_string()),
        ("camera.fy", r.fy.to_string()),
        ("camera.cx", r.cx.to_string()),
        ("camera.cy", r.cy.to_string()),
        ("camera.baseline_m", r.baseline_m.to_string()),
        ("camera.image_h", r.image_h.to_string()),
        ("camera.image_w", r.image_w.to_string()),
        ("disparity.bins", c.disp_bins.to_string()),
        ("disparity.depth_min", c.disp_depth_min.to_string()),
        ("disparity.depth_max", c.disp_depth_max.to_string()),
        ("depth.bins", c.depth_bins.num_bins.to_string()),
        ("depth.min", c.depth_bins.d_min.to_string()),
        ("depth.max", c.depth_bins.d_max.to_string()),
        ("depth.spacing", spacing_name(c.depth_bins.spacing).to_string()),
        ("gca.heads", c.gca_heads.to_string()),
        ("gca.blocks", c.gca_blocks.to_string()),
        ("gca.axial", c.gca_axial.to_string()),
        ("gca.alpha_init", c.gca_alpha_init.to_string()),
        ("gca.renormalize", c.gca_renormalize.to_string()),
        ("gca.full_cap", c.gca_full_cap.to_string()),
        ("ddvm.blocks", c.ddvm_blocks.to_string()),
        ("ddvm.phi_channels", c.ddvm_phi_channels.to_string()),
        ("refine.points", c.refine_points.to_string()),
        ("refine.max_offset", c.refine_max_offset.to_string()),
        ("refine.self_round", c.refine_self_round.to_string()),
        ("fusion.concat_joint", c.concat_joint.to_string()),
        ("strategy.depth", c.depth_strategy.name().to_string()),
        ("strategy.fusion", c.fusion_strategy.name().to_string()),
        ("loss.lambda_d", c.loss.lambda_d.to_string()),
        ("loss.lambda_seg", c.loss.lambda_seg.to_string()),
        ("train.seed", c.seed.to_string()),
        ("train.scenes", c.train_scenes.to_string()),
        ("train.eval_scenes", c.eval_scenes.to_string()),
        ("train.steps", c.steps.to_string()),
        ("train.lr", c.learning_rate.to_string()),
        ("synth.feature_noise", c.feature_noise.to_string()),
        ("synth.cost_noise", c.cost_noise.to_string()),
        ("synth.cost_sharpness", c.cost_sharpness.to_string()),
        ("synth.mark_unobservable", c.mark_unobservable.to_string()),
    ]
}

pub fn set(c: &mut PipelineConfig, key: &str, v: &str) -> Result<(), String> {
    match key {
        "grid.dims" => {
            let parts: Vec<usize> = v.split(',').map(|p| num(p.trim())).collect::<Result<_, _>>()?;
            c.dims = parts
                .try_into()
                .map_err(|_| format!("{v:?} is not three comma-separated extents"))?;
        }
        "grid.voxel_size_m" => c.voxel_size_m = num(v)?,
        "grid.num_classes" => c.num_classes = num(v)?,
        "model.channels" => c.channels = num(v)?,
        "camera.fx" => c.rig.fx = num(v)?,
        "camera.fy" => c.rig.fy = num(v)?,
        "camera.cx" => c.rig.cx = num(v)?,
        "camera.cy" => c.rig.cy = num(v)?,
        "camera.baseline_m" => c.rig.baseline_m = num(v)?,
        "camera.image_h" => c.rig.image_h = num(v)?,
        "camera.image_w" => c.rig.image_w = num(v)?,
        "disparity.bins" => c.disp_bins = num(v)?,
        "disparity.depth_min" => c.disp_depth_min = num(v)?,
        "disparity.depth_max" => c.disp_depth_max = num(v)?,
        "depth.bins" => c.depth_bins.num_bins = num(v)?,
        "depth.min" => c.depth_bins.d_min = num(v)?,
        "depth.max" => c.depth_bins.d_max = num(v)?,
        "depth.spacing" => {
            c.depth_bins.spacing = match v {
                "uniform" => BinSpacing::Uniform,
                "linear-increasing" => BinSpacing::LinearIncreasing,
                _ => return Err(format!("unknown bin spacing {v:?}")),
            }
        }
        "gca.heads" => c.gca_heads = num(v)?,
        "gca.blocks" => c.gca_blocks = num(v)?,
        "gca.axial" => c.gca_axial = flag(v)?,
        "gca.alpha_init" => c.gca_alpha_init = num(v)?,
        "gca.renormalize" => c.gca_renormalize = flag(v)?,
        "gca.full_cap" => c.gca_full_cap = num(v)?,
        "ddvm.blocks" => c.ddvm_blocks = num(v)?,
        "ddvm.phi_channels" => c.ddvm_phi_channels = num(v)?,
        "refine.points" => c.refine_points = num(v)?,
        "refine.max_offset" => c.refine_max_offset = num(v)?,
        "refine.self_round" => c.refine_self_round = flag(v)?,
        "fusion.concat_joint" => c.concat_joint = flag(v)?,
        "strategy.depth" => c.depth_strategy = v.parse().map_err(|e| format!("{e}"))?,
        "strategy.fusion" => c.fusion_strategy = v.parse().map_err(|e| format!("{e}"))?,
        "loss.lambda_d" => c.loss.lambda_d = num(v)?,
        "loss.lambda_seg" => c.loss.lambda_seg = num(v)?,
        "train.seed" => c.seed = num(v)?,
        "train.scenes" => c.train_scenes = num(v)?,
        "train.eval_scenes" => c.eval_scenes = num(v)?,
        "train.steps" => c.steps = num(v)?,
        "train.lr" => c.learning_rate = num(v)?,
        "synth.feature_noise" => c.feature_noise = num(v)?,
        "synth.cost_noise" => c.cost_noise = num(v)?,
        "synth.cost_sharpness" => c.cost_sharpness = num(v)?,
        "synth.mark_unobservable" => c.mark_unobservable = flag(v)?,
        _ => return Err(format!("unknown key {key:?}")),
    }
    Ok(())
}

pub fn to_text(c: &PipelineConfig) -> String {
    to_pairs(c).into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Parses `text` on top of the defaults and validates the result.
pub fn parse(text: &str) -> Result<PipelineConfig, ConfigError> {
    let mut cfg = PipelineConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| ConfigError::Line { line: i + 1, msg };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
        set(&mut cfg, k.trim(), v.trim()).map_err(err)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<PipelineConfig, ConfigError> {
    parse(&std::fs::read_to_string(path)?)
}

/// The defaults, or the file at `path` when given.
pub fn load_or_default(path: Option<&Path>) -> Result<PipelineConfig, ConfigError> {
    match path {
        Some(p) => load(p),
        None => Ok(PipelineConfig::default()),
    }
}
