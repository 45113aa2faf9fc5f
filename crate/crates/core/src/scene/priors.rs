use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};
use crate::scene::{
    generate_scene, mark_unobservable, raycast, CameraPose, CameraRig, SceneSpec, VoxelGrid,
};
use crate::tensor::Tensor;

const COST_STREAM: u64 = 2;
const FEATURE_STREAM: u64 = 3;

/// Box-Muller draw from N(0, 1).
fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    crate::math::sqrt(-2.0 * crate::math::ln(u1)) * crate::math::cos(core::f64::consts::TAU * u2)
}

/// `fx · baseline / depth`, with 0 kept for pixels without a hit.
pub fn depth_to_disparity(depth: &Tensor, rig: &CameraRig) -> Tensor {
    let fb = rig.fx * rig.baseline_m;
    depth.map(|z| if z > 0.0 { fb / z } else { 0.0 })
}

pub fn disparity_to_depth(disparity: &Tensor, rig: &CameraRig) -> Tensor {
    let fb = rig.fx * rig.baseline_m;
    disparity.map(|d| if d > 0.0 { fb / d } else { 0.0 })
}

/// Bins uniformly spaced in disparity, centres from `min` to `max` inclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisparityBins {
    pub count: usize,
    pub min: f64,
    pub max: f64,
}

impl DisparityBins {
    /// Bins covering the disparities of depths in `[depth_min, depth_max]`.
    pub fn from_depth_range(rig: &CameraRig, depth_min: f64, depth_max: f64, count: usize) -> Result<Self> {
        if !(depth_min > 0.0 && depth_max > depth_min) {
            return Err(config_err("depth range must satisfy 0 < min < max"));
        }
        let fb = rig.fx * rig.baseline_m;
        let bins = Self {
            count,
            min: fb / depth_max,
            max: fb / depth_min,
        };
        bins.validate()?;
        Ok(bins)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count < 2 {
            return Err(config_err("at least two disparity bins are required"));
        }
        if !(self.min > 0.0 && self.max > self.min && self.max.is_finite()) {
            return Err(config_err("disparity range must satisfy 0 < min < max"));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.max - self.min) / (self.count - 1) as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.min + i as f64 * self.step()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.center(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    /// `[D_disp, H, W]`, a distribution over bins at every pixel.
    pub volume: Tensor,
    /// Pixels whose disparity fell outside the bin range and was clamped.
    pub clamped: usize,
}

/// Per-pixel softmax of `−sharpness·(centre − disparity)²` with Gaussian
/// logit noise. No-hit pixels (disparity 0) get a noisy uniform distribution.
pub fn synth_cost_volume(
    disparity: &Tensor,
    bins: &DisparityBins,
    sharpness: f64,
    noise: f64,
    seed: u64,
) -> Result<CostVolume> {
    bins.validate()?;
    if !(sharpness > 0.0 && sharpness.is_finite()) {
        return Err(config_err("cost volume sharpness must be positive"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(config_err("cost volume noise must be non-negative"));
    }
    if disparity.rank() != 2 {
        return Err(config_err("disparity map must be [H, W]"));
    }
    let pixels = disparity.len();
    let d_count = bins.count;
    let centers = bins.centers();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(COST_STREAM);
    let mut out = vec![0.0; d_count * pixels];
    let mut clamped = 0;
    let mut logits = vec![0.0; d_count];
    for p in 0..pixels {
        let d = disparity.data()[p];
        let hit = d > 0.0;
        let target = if hit && (d < bins.min || d > bins.max) {
            clamped += 1;
            d.clamp(bins.min, bins.max)
        } else {
            d
        };
        for (k, l) in logits.iter_mut().enumerate() {
            let base = if hit {
                let delta = centers[k] - target;
                -sharpness * delta * delta
            } else {
                0.0
            };
            let eps: f64 = if noise > 0.0 { standard_normal(&mut rng) } else { 0.0 };
            *l = base + noise * eps;
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| crate::math::exp(l - m)).sum();
        for (k, l) in logits.iter().enumerate() {
            out[k * pixels + p] = crate::math::exp(l - m) / z;
        }
    }
    let mut shape = vec![d_count];
    shape.extend_from_slice(disparity.shape());
    Ok(CostVolume {
        volume: Tensor::new(shape, out)?,
        clamped,
    })
}

/// Unit basis vector for `class` in `embed_dim` dimensions. Class 0 doubles
/// as the sky embedding.
pub fn class_embedding(class: u8, embed_dim: usize) -> Result<Vec<f64>> {
    if class as usize >= embed_dim {
        return Err(config_err(alloc::format!(
            "class {class} has no embedding in {embed_dim} channels"
        )));
    }
    let mut e = vec![0.0; embed_dim];
    e[class as usize] = 1.0;
    Ok(e)
}

/// Class whose embedding has the largest inner product with each pixel's
/// feature vector.
pub fn decode_nearest_embedding(features: &Tensor, num_classes: usize) -> Result<Vec<u8>> {
    if features.rank() != 3 || features.shape()[0] < num_classes || num_classes == 0 {
        return Err(config_err("features must be [C, H, W] with C >= num_classes"));
    }
    let pixels = features.shape()[1] * features.shape()[2];
    let data = features.data();
    Ok((0..pixels)
        .map(|p| {
            let mut best = 0;
            for k in 1..num_classes {
                if data[k * pixels + p] > data[best * pixels + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect())
}

/// Context features and 2D labels from precomputed first hits.
pub fn context_features_from_hits(
    hits: &[Option<[usize; 3]>],
    grid: &VoxelGrid,
    rig: &CameraRig,
    embed_dim: usize,
    noise: f64,
    seed: u64,
) -> Result<(Tensor, Tensor)> {
    if hits.len() != rig.num_pixels() {
        return Err(config_err("hit list does not match the image size"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(config_err("feature noise must be non-negative"));
    }
    let pixels = hits.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(FEATURE_STREAM);
    let mut feats = vec![0.0; embed_dim * pixels];
    let mut labels = vec![0.0; pixels];
    for (p, hit) in hits.iter().enumerate() {
        let class = hit.map_or(0, |v| grid.get(v[0], v[1], v[2]));
        labels[p] = class as f64;
        for (k, e) in class_embedding(class, embed_dim)?.into_iter().enumerate() {
            feats[k * pixels + p] = e;
        }
    }
    if noise > 0.0 {
        for f in &mut feats {
            let eps: f64 = standard_normal(&mut rng);
            *f += noise * eps;
        }
    }
    Ok((
        Tensor::new(vec![embed_dim, rig.image_h, rig.image_w], feats)?,
        Tensor::new(vec![rig.image_h, rig.image_w], labels)?,
    ))
}

/// Features `[C, H, W]` and label map `[H, W]` seen from `pose`.
pub fn synth_context_features(
    grid: &VoxelGrid,
    rig: &CameraRig,
    pose: &CameraPose,
    embed_dim: usize,
    noise: f64,
    seed: u64,
) -> Result<(Tensor, Tensor)> {
    let rc = raycast(grid, rig, pose)?;
    context_features_from_hits(&rc.hits, grid, rig, embed_dim, noise, seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub scene: SceneSpec,
    pub rig: CameraRig,
    pub bins: DisparityBins,
    pub embed_dim: usize,
    pub feature_noise: f64,
    pub cost_sharpness: f64,
    pub cost_noise: f64,
    pub mark_unobservable: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let rig = CameraRig::default();
        Self {
            scene: SceneSpec::new([32, 32, 8], 5),
            rig,
            bins: DisparityBins::from_depth_range(&rig, 1.0, 8.0, 12).expect("valid default range"),
            embed_dim: 16,
            feature_noise: 0.1,
            cost_sharpness: 4.0,
            cost_noise: 0.1,
            mark_unobservable: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub grid: VoxelGrid,
    pub rig: CameraRig,
    pub disparity_bins: DisparityBins,
    /// `[H, W]` z-depth in meters, 0 where the ray leaves the grid.
    pub depth_map: Tensor,
    /// `[D_disp, H, W]`.
    pub disparity_volume: Tensor,
    /// `[C, H, W]`.
    pub context_features: Tensor,
    /// `[H, W]` class ids stored as floats.
    pub seg_labels_2d: Tensor,
}

impl SyntheticSample {
    pub fn pose(&self) -> CameraPose {
        CameraPose::canonical(&self.grid)
    }
}

/// Scene plus all three encoder outputs for `seed`.
pub fn synthesize(seed: u64, cfg: &SynthConfig) -> Result<SyntheticSample> {
    if cfg.embed_dim < cfg.scene.num_classes {
        return Err(config_err("embedding width must be at least num_classes"));
    }
    let mut grid = generate_scene(seed, &cfg.scene)?;
    let pose = CameraPose::canonical(&grid);
    if cfg.mark_unobservable {
        mark_unobservable(&mut grid, &cfg.rig, &pose)?;
    }
    let rc = raycast(&grid, &cfg.rig, &pose)?;
    let disparity = depth_to_disparity(&rc.depth, &cfg.rig);
    let cost = synth_cost_volume(&disparity, &cfg.bins, cfg.cost_sharpness, cfg.cost_noise, seed)?;
    let (context_features, seg_labels_2d) =
        context_features_from_hits(&rc.hits, &grid, &cfg.rig, cfg.embed_dim, cfg.feature_noise, seed)?;
    Ok(SyntheticSample {
        grid,
        rig: cfg.rig,
        disparity_bins: cfg.bins,
        depth_map: rc.depth,
        disparity_volume: cost.volume,
        context_features,
        seg_labels_2d,
    })
}
