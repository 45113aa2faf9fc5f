//! Per-pixel depth distributions from the stereo cost volume.
//!
//! Three interchangeable strategies produce a `[D_depth, H, W]` distribution:
//! a learned disparity-to-depth channel mapper with a shallow 3D CNN, a fixed
//! analytical resampling of disparity mass onto depth bins, and a one-hot
//! encoding of the dense depth map.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::Rng;

use crate::error::{config_err, dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv3d, LayerNorm, Linear};
use crate::param::ParamStore;
use crate::scene::{CameraRig, DisparityBins};
use crate::tensor::{sum_along, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinSpacing {
    Uniform,
    /// Bin widths grow linearly with the bin index.
    LinearIncreasing,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthBinSpec {
    pub num_bins: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub spacing: BinSpacing,
}

impl DepthBinSpec {
    pub fn uniform(num_bins: usize, d_min: f64, d_max: f64) -> Self {
        Self {
            num_bins,
            d_min,
            d_max,
            spacing: BinSpacing::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_bins < 2 {
            return Err(config_err("at least two depth bins are required"));
        }
        if !(self.d_min > 0.0 && self.d_max > self.d_min && self.d_max.is_finite()) {
            return Err(config_err(format!(
                "depth range [{}, {}] must satisfy 0 < d_min < d_max",
                self.d_min, self.d_max
            )));
        }
        Ok(())
    }

    /// `num_bins + 1` increasing bin edges from `d_min` to `d_max`.
    pub fn edges(&self) -> Vec<f64> {
        let n = self.num_bins as f64;
        let span = self.d_max - self.d_min;
        (0..=self.num_bins)
            .map(|i| {
                let i = i as f64;
                let frac = match self.spacing {
                    BinSpacing::Uniform => i / n,
                    BinSpacing::LinearIncreasing => i * (i + 1.0) / (n * (n + 1.0)),
                };
                self.d_min + span * frac
            })
            .collect()
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges().windows(2).map(|e| 0.5 * (e[0] + e[1])).collect()
    }

    /// Bin containing `depth`, clamping depths outside the range to the edge
    /// bins. The flag reports whether clamping happened.
    pub fn bin_of(&self, depth: f64) -> (usize, bool) {
        let edges = self.edges();
        if depth < self.d_min {
            return (0, true);
        }
        if depth >= self.d_max {
            return (self.num_bins - 1, depth > self.d_max);
        }
        let i = edges.partition_point(|&e| e <= depth) - 1;
        (i.min(self.num_bins - 1), false)
    }
}

/// Checks that `probs: [D, H, W]` is non-negative with unit mass per pixel.
pub fn validate_distribution(probs: &Tensor, tol: f64) -> Result<()> {
    if probs.rank() != 3 {
        return Err(config_err("depth distribution must be [D, H, W]"));
    }
    if probs.data().iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::NonFinite(String::from("negative or NaN depth probability")));
    }
    let sums = sum_along(probs, 0);
    if let Some(s) = sums.data().iter().find(|s| (*s - 1.0).abs() > tol) {
        return Err(config_err(format!("depth distribution column sums to {s}")));
    }
    Ok(())
}

/// `Σ_b probs[b] · centre[b]` per pixel.
pub fn expected_depth(probs: &Tensor, bins: &DepthBinSpec) -> Result<Tensor> {
    if probs.rank() != 3 || probs.shape()[0] != bins.num_bins {
        return Err(dim_err("expected_depth", probs.shape(), &[bins.num_bins]));
    }
    let centers = bins.centers();
    let (h, w) = (probs.shape()[1], probs.shape()[2]);
    let pixels = h * w;
    let mut out = vec![0.0; pixels];
    for (b, c) in centers.iter().enumerate() {
        for (p, o) in out.iter_mut().enumerate() {
            *o += probs.data()[b * pixels + p] * c;
        }
    }
    Tensor::new(vec![h, w], out)
}

/// One-hot at the bin containing each depth, uniform where depth is 0.
pub fn onehot_from_depthmap(depth: &Tensor, bins: &DepthBinSpec) -> Result<Tensor> {
    bins.validate()?;
    if depth.rank() != 2 {
        return Err(config_err("depth map must be [H, W]"));
    }
    let d = bins.num_bins;
    let pixels = depth.len();
    let mut out = vec![0.0; d * pixels];
    for (p, &z) in depth.data().iter().enumerate() {
        if z > 0.0 {
            out[bins.bin_of(z).0 * pixels + p] = 1.0;
        } else {
            for b in 0..d {
                out[b * pixels + p] = 1.0 / d as f64;
            }
        }
    }
    let mut shape = vec![d];
    shape.extend_from_slice(depth.shape());
    Tensor::new(shape, out)
}

/// Fixed `[D_depth, D_disp]` matrix moving each disparity bin's mass to the
/// depth `fx·b/d`, split linearly between the two nearest depth centres.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampleMatrix {
    pub weights: Tensor,
    /// Disparity bins whose depth lies outside `[d_min, d_max]`.
    pub clamped: usize,
}

pub fn resample_matrix(rig: &CameraRig, disp: &DisparityBins, bins: &DepthBinSpec) -> Result<ResampleMatrix> {
    disp.validate()?;
    bins.validate()?;
    let centers = bins.centers();
    let nd = bins.num_bins;
    let mut m = Tensor::zeros(&[nd, disp.count]);
    let mut clamped = 0;
    for k in 0..disp.count {
        let z = rig.fx * rig.baseline_m / disp.center(k);
        if z < bins.d_min || z > bins.d_max {
            clamped += 1;
        }
        if z <= centers[0] {
            m.set(&[0, k], 1.0);
        } else if z >= centers[nd - 1] {
            m.set(&[nd - 1, k], 1.0);
        } else {
            let i = centers.partition_point(|&c| c <= z) - 1;
            let t = (z - centers[i]) / (centers[i + 1] - centers[i]);
            m.set(&[i, k], 1.0 - t);
            if t > 0.0 {
                m.set(&[i + 1, k], t);
            }
        }
    }
    Ok(ResampleMatrix { weights: m, clamped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resampled {
    pub probs: Tensor,
    pub clamped: usize,
}

/// Analytical resampling of `v_disp: [D_disp, H, W]` onto depth bins,
/// renormalised per pixel.
pub fn analytical_resample(
    v_disp: &Tensor,
    rig: &CameraRig,
    disp: &DisparityBins,
    bins: &DepthBinSpec,
) -> Result<Resampled> {
    if v_disp.rank() != 3 || v_disp.shape()[0] != disp.count {
        return Err(dim_err("analytical_resample", v_disp.shape(), &[disp.count]));
    }
    let rm = resample_matrix(rig, disp, bins)?;
    let (h, w) = (v_disp.shape()[1], v_disp.shape()[2]);
    let pixels = h * w;
    let mut out = vec![0.0; bins.num_bins * pixels];
    crate::tensor::gemm(
        bins.num_bins,
        disp.count,
        pixels,
        rm.weights.data(),
        false,
        v_disp.data(),
        false,
        &mut out,
    );
    for p in 0..pixels {
        let total: f64 = (0..bins.num_bins).map(|b| out[b * pixels + p]).sum();
        if total > 0.0 {
            for b in 0..bins.num_bins {
                out[b * pixels + p] /= total;
            }
        } else {
            for b in 0..bins.num_bins {
                out[b * pixels + p] = 1.0 / bins.num_bins as f64;
            }
        }
    }
    Ok(Resampled {
        probs: Tensor::new(vec![bins.num_bins, h, w], out)?,
        clamped: rm.clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthStrategy {
    Ddvm,
    Ar,
    OneHot,
    /// Channel mapper without the 3D refinement CNN.
    RefineOff,
}

impl DepthStrategy {
    pub const ALL: [DepthStrategy; 4] = [Self::Ddvm, Self::Ar, Self::OneHot, Self::RefineOff];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ddvm => "ddvm",
            Self::Ar => "ar",
            Self::OneHot => "onehot",
            Self::RefineOff => "refine-off",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, Self::Ddvm | Self::RefineOff)
    }
}

impl FromStr for DepthStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| config_err(format!("unknown depth strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdvmConfig {
    pub disp_bins: usize,
    pub depth_bins: usize,
    pub width: usize,
    pub num_blocks: usize,
    pub phi_channels: usize,
    pub refine: bool,
}

impl DdvmConfig {
    pub fn new(disp_bins: usize, depth_bins: usize) -> Self {
        Self {
            disp_bins,
            depth_bins,
            width: 2 * disp_bins.max(depth_bins),
            num_blocks: 2,
            phi_channels: 8,
            refine: true,
        }
    }
}

#[derive(Debug, Clone)]
struct MapperBlock {
    norm: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Learned disparity-to-depth volume mapping.
#[derive(Debug, Clone)]
pub struct Ddvm {
    pub cfg: DdvmConfig,
    lift: Linear,
    blocks: Vec<MapperBlock>,
    head: Linear,
    phi1: Conv3d,
    phi2: Conv3d,
}

impl Ddvm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: DdvmConfig, rng: &mut R) -> Result<Self> {
        if cfg.disp_bins == 0 || cfg.depth_bins == 0 || cfg.width == 0 || cfg.phi_channels == 0 {
            return Err(config_err("DDVM extents must be positive"));
        }
        let lift = Linear::new(store, &format!("{prefix}.lift"), cfg.disp_bins, cfg.width, rng);
        let blocks = (0..cfg.num_blocks)
            .map(|i| MapperBlock {
                norm: LayerNorm::new(store, &format!("{prefix}.block{i}.norm"), cfg.width),
                fc1: Linear::new(store, &format!("{prefix}.block{i}.fc1"), cfg.width, cfg.width, rng),
                fc2: Linear::new(store, &format!("{prefix}.block{i}.fc2"), cfg.width, cfg.width, rng),
            })
            .collect();
        let head = Linear::new(store, &format!("{prefix}.head"), cfg.width, cfg.depth_bins, rng);
        let phi1 = Conv3d::new(store, &format!("{prefix}.phi1"), 1, cfg.phi_channels, 3, rng);
        let phi2 = Conv3d::new(store, &format!("{prefix}.phi2"), cfg.phi_channels, 1, 3, rng);
        Ok(Self {
            cfg,
            lift,
            blocks,
            head,
            phi1,
            phi2,
        })
    }

    /// Zeroes the final affine map and the last refinement layer, making the
    /// output uniform.
    pub fn zero_output(&self, store: &mut ParamStore) {
        self.head.zero(store);
        self.phi2.zero(store);
    }

    /// Maps `v_disp: [D_disp, H, W]` to depth probabilities `[D_depth, H, W]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, v_disp: Var) -> Result<Var> {
        let shape = g.shape(v_disp).to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.disp_bins {
            return Err(config_err(format!(
                "cost volume {shape:?} does not match {} disparity bins",
                self.cfg.disp_bins
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        let flat = g.reshape(v_disp, &[self.cfg.disp_bins, h * w])?;
        let tokens = g.permute(flat, &[1, 0])?;
        let mut x = self.lift.forward(g, store, tokens)?;
        for b in &self.blocks {
            let n = b.norm.forward(g, store, x, 1)?;
            let hdn = b.fc1.forward(g, store, n)?;
            let hdn = g.relu(hdn)?;
            let hdn = b.fc2.forward(g, store, hdn)?;
            x = g.add(x, hdn)?;
        }
        let logits = self.head.forward(g, store, x)?;
        let logits = g.permute(logits, &[1, 0])?;
        let d = self.cfg.depth_bins;
        let logits = if self.cfg.refine {
            let vol = g.reshape(logits, &[1, d, h, w])?;
            let y = self.phi1.forward(g, store, vol)?;
            let y = g.relu(y)?;
            let y = self.phi2.forward(g, store, y)?;
            g.reshape(y, &[d, h, w])?
        } else {
            g.reshape(logits, &[d, h, w])?
        };
        g.softmax(logits, 0)
    }
}
