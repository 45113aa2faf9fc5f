//! The assembled network: context adapter, depth distribution, view
//! transformation, fusion and the voxel decoding head.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::config::PipelineConfig;
use crate::depth::{analytical_resample, onehot_from_depthmap, Ddvm, DepthStrategy};
use crate::error::{config_err, Result};
use crate::fusion::Fusion;
use crate::geo::GcaAdapter;
use crate::graph::{Graph, Var};
use crate::losses::{
    depth_loss, scal_loss, seg_loss_2d, weighted_ce, LossComponents, ScalMode,
};
use crate::metrics::argmax_labels;
use crate::nn::{Conv3d, Linear};
use crate::param::ParamStore;
use crate::scene::{CameraPose, GridSpec, SyntheticSample, VoxelGrid};
use crate::tensor::Tensor;
use crate::view::{
    default_query_cap, frustum_index, frustum_points, gather_queries, lift, propose_queries, query_geometry,
    voxel_pool, FrustumIndex, QueryGeometry, QueryProposals, VoxelRefiner,
};

/// Checks that `sample` was produced with the geometry of `cfg`.
pub fn check_compatible(cfg: &PipelineConfig, sample: &SyntheticSample) -> Result<()> {
    if sample.grid.dims != cfg.dims {
        return Err(config_err(format!(
            "sample grid {:?} does not match configured dims {:?}",
            sample.grid.dims, cfg.dims
        )));
    }
    if sample.grid.voxel_size_m != cfg.voxel_size_m {
        return Err(config_err(format!(
            "sample voxel size {} does not match configured {}",
            sample.grid.voxel_size_m, cfg.voxel_size_m
        )));
    }
    if sample.rig != cfg.rig {
        return Err(config_err("sample camera rig differs from the configured one"));
    }
    let disp = cfg.disparity_bins()?;
    if sample.disparity_bins.count != disp.count
        || sample.disparity_volume.shape() != [disp.count, cfg.rig.image_h, cfg.rig.image_w]
    {
        return Err(config_err(format!(
            "sample has {} disparity bins (volume {:?}), configuration expects {}",
            sample.disparity_bins.count,
            sample.disparity_volume.shape(),
            disp.count
        )));
    }
    if sample.context_features.shape() != [cfg.channels, cfg.rig.image_h, cfg.rig.image_w] {
        return Err(config_err(format!(
            "context features {:?} do not match {} channels on a {}x{} image",
            sample.context_features.shape(),
            cfg.channels,
            cfg.rig.image_h,
            cfg.rig.image_w
        )));
    }
    if let Some(&bad) = sample
        .grid
        .labels
        .iter()
        .find(|&&l| l != crate::scene::UNKNOWN && l as usize >= cfg.num_classes)
    {
        return Err(config_err(format!(
            "sample contains label {bad} but only {} classes are configured",
            cfg.num_classes
        )));
    }
    Ok(())
}

/// A sample together with every geometric quantity the forward pass needs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub sample: SyntheticSample,
    pub pose: CameraPose,
    pub grid: GridSpec,
    pub frustum: FrustumIndex,
    pub proposals: QueryProposals,
    pub geometry: QueryGeometry,
    /// Depth distribution for the non-learned strategies.
    pub fixed_depth: Option<Tensor>,
}

pub fn prepare(cfg: &PipelineConfig, sample: SyntheticSample) -> Result<Prepared> {
    check_compatible(cfg, &sample)?;
    let pose = sample.pose();
    let grid = sample.grid.spec();
    let frustum = frustum_index(&frustum_points(&cfg.rig, &pose, &cfg.depth_bins), &grid)?;
    let proposals = propose_queries(&sample.depth_map, &cfg.rig, &pose, &grid, default_query_cap(&grid))?;
    let geometry = query_geometry(&proposals, &cfg.rig, &pose, &cfg.depth_bins, &grid)?;
    let fixed_depth = match cfg.depth_strategy {
        DepthStrategy::Ar => Some(
            analytical_resample(&sample.disparity_volume, &cfg.rig, &sample.disparity_bins, &cfg.depth_bins)?.probs,
        ),
        DepthStrategy::OneHot => Some(onehot_from_depthmap(&sample.depth_map, &cfg.depth_bins)?),
        DepthStrategy::Ddvm | DepthStrategy::RefineOff => None,
    };
    Ok(Prepared {
        sample,
        pose,
        grid,
        frustum,
        proposals,
        geometry,
        fixed_depth,
    })
}

/// Intermediate and final tensors of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    pub context: Var,
    /// `[K, H, W]`
    pub seg_logits: Var,
    /// `[D_depth, H, W]`
    pub depth_probs: Var,
    pub f_lss: Var,
    pub f_vt: Var,
    pub fused: Var,
    /// `[K, X, Y, Z]`
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct SscModel {
    pub cfg: PipelineConfig,
    pub gca: GcaAdapter,
    pub seg_head: Linear,
    pub ddvm: Option<Ddvm>,
    pub refiner: VoxelRefiner,
    pub fusion: Fusion,
    pub head_conv: Conv3d,
    pub classifier: Conv3d,
}

impl SscModel {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: PipelineConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let gca = GcaAdapter::new(store, "gca", cfg.gca_config(), rng)?;
        let seg_head = Linear::new(store, "seg_head", c, cfg.num_classes, rng);
        let ddvm = if cfg.depth_strategy.is_learned() {
            Some(Ddvm::new(store, "ddvm", cfg.ddvm_config(), rng)?)
        } else {
            None
        };
        let refiner = VoxelRefiner::new(store, "vt", cfg.refine_config(), rng)?;
        let fusion = Fusion::new(store, "fusion", cfg.fusion_strategy, cfg.fusion_config(), rng)?;
        let head_conv = Conv3d::new(store, "head.conv", c, c, 3, rng);
        let classifier = Conv3d::new(store, "head.cls", c, cfg.num_classes, 1, rng);
        Ok(Self {
            cfg,
            gca,
            seg_head,
            ddvm,
            refiner,
            fusion,
            head_conv,
            classifier,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, p: &Prepared) -> Result<Outputs> {
        let s = &p.sample;
        let (h, w) = (self.cfg.rig.image_h, self.cfg.rig.image_w);
        let k = self.cfg.num_classes;

        let features = g.constant(s.context_features.clone());
        let context = self.gca.forward(g, store, features, &s.depth_map)?;

        let tokens = g.permute(context, &[1, 2, 0])?;
        let tokens = g.reshape(tokens, &[h * w, self.cfg.channels])?;
        let seg = self.seg_head.forward(g, store, tokens)?;
        let seg = g.permute(seg, &[1, 0])?;
        let seg_logits = g.reshape(seg, &[k, h, w])?;

        let depth_probs = match (&self.ddvm, &p.fixed_depth) {
            (Some(m), _) => {
                let v = g.constant(s.disparity_volume.clone());
                m.forward(g, store, v)?
            }
            (None, Some(d)) => g.constant(d.clone()),
            (None, None) => return Err(config_err("sample was prepared for a learned depth strategy")),
        };

        let frustum = lift(g, context, depth_probs)?;
        let f_lss = voxel_pool(g, frustum, &p.frustum, &p.grid)?;
        let queries = if p.proposals.is_empty() {
            g.constant(Tensor::zeros(&[1, self.cfg.channels]))
        } else {
            gather_queries(g, f_lss, &p.proposals)?
        };
        let f_vt = self
            .refiner
            .forward(g, store, queries, frustum, &p.proposals, &p.geometry, &p.grid)?;
        let fused = self.fusion.forward(g, store, f_lss, f_vt)?;

        let hidden = self.head_conv.forward(g, store, fused)?;
        let hidden = g.relu(hidden)?;
        let logits = self.classifier.forward(g, store, hidden)?;
        Ok(Outputs {
            context,
            seg_logits,
            depth_probs,
            f_lss,
            f_vt,
            fused,
            logits,
        })
    }

    pub fn losses(&self, g: &mut Graph, out: &Outputs, p: &Prepared, class_weights: &[f64]) -> Result<LossComponents> {
        let s = &p.sample;
        let depth = depth_loss(g, out.depth_probs, &s.depth_map, &self.cfg.depth_bins)?.value;
        let seg = seg_loss_2d(g, out.seg_logits, &s.seg_labels_2d)?.value;
        let ce = weighted_ce(g, out.logits, &s.grid, class_weights)?.value;
        let probs = g.softmax(out.logits, 0)?;
        let scal_geo = scal_loss(g, probs, &s.grid, ScalMode::Geo)?.value;
        let scal_sem = scal_loss(g, probs, &s.grid, ScalMode::Sem)?.value;
        Ok(LossComponents {
            depth,
            seg,
            ce,
            scal_geo,
            scal_sem,
        })
    }

    /// Argmax labels of the voxel logits.
    pub fn predict(&self, g: &Graph, out: &Outputs, p: &Prepared) -> Result<VoxelGrid> {
        argmax_labels(g.value(out.logits), &p.sample.grid)
    }
}

/// Prepares every sample of `samples` for `cfg`.
pub fn prepare_all(cfg: &PipelineConfig, samples: Vec<SyntheticSample>) -> Result<Vec<Prepared>> {
    samples.into_iter().map(|s| prepare(cfg, s)).collect()
}
