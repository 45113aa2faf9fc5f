//! The finite-difference gradient suite over every differentiable module.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::depth::{Ddvm, DdvmConfig, DepthBinSpec};
use crate::error::{config_err, Result};
use crate::fusion::{AafFusion, ChannelAttention3d, FusionConfig};
use crate::geo::{AttentionMode, GcaAdapter, GcaBlock, GcaConfig};
use crate::gradcheck::{gradcheck, probe_loss, random_tensor, GradCheckConfig, GradCheckEntry};
use crate::graph::{Graph, Var};
use crate::losses::{class_weights, depth_loss, scal_loss, seg_loss_2d, weighted_ce, ScalMode};
use crate::param::ParamStore;
use crate::scene::{generate_scene, raycast, CameraPose, CameraRig, SceneSpec, VoxelGrid, UNKNOWN};
use crate::tensor::Tensor;
use crate::view::{
    default_query_cap, frustum_index, frustum_points, gather_queries, lift, propose_queries, query_geometry,
    voxel_pool, RefineConfig, VoxelRefiner,
};

pub const SUITE_THRESHOLD: f64 = 1e-4;

pub const MODULES: [&str; 7] = ["gca", "ddvm", "lift_pool", "voxel_refine", "aaf", "ca3d", "losses"];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckedOp {
    pub op: String,
    pub entries: Vec<GradCheckEntry>,
}

impl CheckedOp {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_err))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleCheck {
    pub module: &'static str,
    pub ops: Vec<CheckedOp>,
}

impl ModuleCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.ops.iter().fold(0.0, |m, o| m.max(o.max_rel_err()))
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < SUITE_THRESHOLD
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn check<F>(op: &str, f: F, inputs: &[(&str, Tensor)], store: &ParamStore, cfg: &GradCheckConfig) -> Result<CheckedOp>
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    Ok(CheckedOp {
        op: op.into(),
        entries: gradcheck(f, inputs, store, cfg)?.entries,
    })
}

fn gca(cfg: &GradCheckConfig) -> Result<Vec<CheckedOp>> {
    let gc = GcaConfig::new(4, 2);
    let mut store = ParamStore::new();
    let block = GcaBlock::new(&mut store, "gca", &gc, &mut rng(3))?;
    let depth = random_tensor(&[5, 6], 1.0, 6.0, 4);
    let axial = check(
        "gca_block_axial",
        |g, s, v| {
            let y = block.forward(g, s, v[0], &depth, &gc, AttentionMode::Axial)?;
            probe_loss(g, y, 17)
        },
        &[("features", random_tensor(&[4, 5, 6], -1.0, 1.0, 5))],
        &store,
        cfg,
    )?;

    let mut fc = GcaConfig::new(4, 2);
    fc.use_axial = false;
    fc.renormalize = true;
    let mut store = ParamStore::new();
    let adapter = GcaAdapter::new(&mut store, "gca", fc, &mut rng(6))?;
    let depth = random_tensor(&[3, 3], 1.0, 6.0, 7);
    let full = check(
        "gca_adapter_full_renormalized",
        |g, s, v| {
            let y = adapter.forward(g, s, v[0], &depth)?;
            probe_loss(g, y, 2)
        },
        &[("features", random_tensor(&[4, 3, 3], -1.0, 1.0, 8))],
        &store,
        cfg,
    )?;
    Ok(vec![axial, full])
}

fn ddvm(cfg: &GradCheckConfig) -> Result<Vec<CheckedOp>> {
    let mut ops = Vec::new();
    for refine in [true, false] {
        let mut dc = DdvmConfig::new(6, 8);
        dc.refine = refine;
        let mut store = ParamStore::new();
        let m = Ddvm::new(&mut store, "ddvm", dc, &mut rng(4))?;
        let name = if refine { "ddvm" } else { "ddvm_refine_off" };
        ops.push(check(
            name,
            |g, s, v| {
                let y = m.forward(g, s, v[0])?;
                probe_loss(g, y, 9)
            },
            &[("v_disp", random_tensor(&[6, 4, 4], 0.0, 1.0, 5))],
            &store,
            cfg,
        )?);
    }
    Ok(ops)
}

fn small_rig() -> CameraRig {
    CameraRig {
        fx: 6.0,
        fy: 6.0,
        cx: 4.0,
        cy: 3.0,
        baseline_m: 0.5,
        image_h: 6,
        image_w: 8,
    }
}

fn small_scene(seed: u64) -> Result<(VoxelGrid, CameraPose)> {
    let vg = generate_scene(seed, &SceneSpec::new([8, 8, 4], 3))?;
    let pose = CameraPose::canonical(&vg);
    Ok((vg, pose))
}

fn lift_pool(cfg: &GradCheckConfig) -> Result<Vec<CheckedOp>> {
    let rig = small_rig();
    let (vg, pose) = small_scene(2)?;
    let grid = vg.spec();
    let bins = DepthBinSpec::uniform(5, 0.3, 2.5);
    let index = frustum_index(&frustum_points(&rig, &pose, &bins), &grid)?;
    let op = check(
        "lift_voxel_pool",
        |g, _, v| {
            let frustum = lift(g, v[0], v[1])?;
            let pooled = voxel_pool(g, frustum, &index, &grid)?;
            probe_loss(g, pooled, 5)
        },
        &[
            ("context", random_tensor(&[3, 6, 8], -1.0, 1.0, 12)),
            ("probs", random_tensor(&[5, 6, 8], 0.0, 1.0, 13)),
        ],
        &ParamStore::new(),
        cfg,
    )?;
    Ok(vec![op])
}

fn voxel_refine(cfg: &GradCheckConfig) -> Result<Vec<CheckedOp>> {
    let rig = small_rig();
    let (vg, pose) = small_scene(2)?;
    let grid = vg.spec();
    let bins = DepthBinSpec::uniform(5, 0.3, 2.5);
    let depth = raycast(&vg, &rig, &pose)?.depth;
    let props = propose_queries(&depth, &rig, &pose, &grid, default_query_cap(&grid))?;
    if props.is_empty() {
        return Err(config_err("gradient probe scene has no visible voxels"));
    }
    let geom = query_geometry(&props, &rig, &pose, &bins, &grid)?;
    let index = frustum_index(&frustum_points(&rig, &pose, &bins), &grid)?;
    let mut rc = RefineConfig::new(3);
    rc.num_points = 3;
    let mut store = ParamStore::new();
    let refiner = VoxelRefiner::new(&mut store, "vt", rc, &mut rng(11))?;
    let op = check(
        "voxel_refine",
        |g, s, v| {
            let frustum = lift(g, v[0], v[1])?;
            let lss = voxel_pool(g, frustum, &index, &grid)?;
            let q = gather_queries(g, lss, &props)?;
            let vt = refiner.forward(g, s, q, frustum, &props, &geom, &grid)?;
            probe_loss(g, vt, 5)
        },
        &[
            ("context", random_tensor(&[3, 6, 8], -1.0, 1.0, 12)),
            ("probs", random_tensor(&[5, 6, 8], 0.0, 1.0, 13)),
        ],
        &store,
        cfg,
    )?;
    Ok(vec![op])
}

fn fusion_inputs(c: usize) -> [(&'static str, Tensor); 2] {
    [
        ("lss", random_tensor(&[c, 3, 3, 2], -1.0, 1.0, 15)),
        ("vt", random_tensor(&[c, 3, 3, 2], -1.0, 1.0, 16)),
    ]
}

fn aaf(cfg: &GradCheckConfig) -> Result<Vec<CheckedOp>> {
    let mut store = ParamStore::new();
    let m = AafFusion::new(&mut store, "aaf", FusionConfig::new(4), &mut rng(14))?;
    let op = check(
        "aaf",
        |g, s, v| {
            let y = m.forward(g, s, v[0], v[1])?;
            probe_loss(g, y, 1)
        },
        &fusion_inputs(4),
        &store,
        cfg,
    )?;
    Ok(vec![op])
}

fn ca3d(cfg: &GradCheckConfig) -> Result<Vec<CheckedOp>> {
    let mut store = ParamStore::new();
    let m = ChannelAttention3d::new(&mut store, "ca", FusionConfig::new(3), &mut rng(20))?;
    let op = check(
        "channel_attention_3d",
        |g, s, v| {
            let y = m.forward(g, s, v[0], v[1])?;
            probe_loss(g, y, 2)
        },
        &fusion_inputs(3),
        &store,
        cfg,
    )?;
    Ok(vec![op])
}

fn losses(cfg: &GradCheckConfig) -> Result<Vec<CheckedOp>> {
    let mut target = VoxelGrid::empty([2, 3, 2], [0.0; 3], 1.0)?;
    target.labels = vec![0, 1, 2, 0, UNKNOWN, 1, 2, 2, 0, 0, 1, UNKNOWN];
    let w = class_weights(&[0.6, 0.3, 0.1]);
    let none = ParamStore::new();
    let mut ops = Vec::new();

    ops.push(check(
        "loss_ce",
        |g, _, v| Ok(weighted_ce(g, v[0], &target, &w)?.value),
        &[("logits", random_tensor(&[3, 2, 3, 2], -2.0, 2.0, 1))],
        &none,
        cfg,
    )?);
    let labels = Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 2.0, 1.0, 0.0])?;
    ops.push(check(
        "loss_seg",
        |g, _, v| Ok(seg_loss_2d(g, v[0], &labels)?.value),
        &[("logits", random_tensor(&[3, 2, 3], -2.0, 2.0, 2))],
        &none,
        cfg,
    )?);
    let bins = DepthBinSpec::uniform(4, 1.0, 5.0);
    let gt = Tensor::new(vec![2, 3], vec![1.2, 0.0, 3.7, 4.9, 2.5, 0.0])?;
    ops.push(check(
        "loss_depth",
        |g, _, v| {
            let p = g.softmax(v[0], 0)?;
            Ok(depth_loss(g, p, &gt, &bins)?.value)
        },
        &[("logits", random_tensor(&[4, 2, 3], -2.0, 2.0, 3))],
        &none,
        cfg,
    )?);
    for (name, mode, seed) in [("loss_scal_geo", ScalMode::Geo, 4), ("loss_scal_sem", ScalMode::Sem, 5)] {
        ops.push(check(
            name,
            |g, _, v| {
                let p = g.softmax(v[0], 0)?;
                Ok(scal_loss(g, p, &target, mode)?.value)
            },
            &[("logits", random_tensor(&[3, 2, 3, 2], -2.0, 2.0, seed))],
            &none,
            cfg,
        )?);
    }
    Ok(ops)
}

/// Runs one named module of the suite.
pub fn check_module(module: &str, cfg: &GradCheckConfig) -> Result<ModuleCheck> {
    let (name, ops) = match module {
        "gca" => ("gca", gca(cfg)?),
        "ddvm" => ("ddvm", ddvm(cfg)?),
        "lift_pool" => ("lift_pool", lift_pool(cfg)?),
        "voxel_refine" => ("voxel_refine", voxel_refine(cfg)?),
        "aaf" => ("aaf", aaf(cfg)?),
        "ca3d" => ("ca3d", ca3d(cfg)?),
        "losses" => ("losses", losses(cfg)?),
        other => {
            return Err(config_err(format!(
                "unknown gradcheck module {other:?}; expected one of {}",
                MODULES.join(", ")
            )))
        }
    };
    Ok(ModuleCheck { module: name, ops })
}

/// Runs `only` or, when `None`, every module.
pub fn run_suite(only: Option<&str>, cfg: &GradCheckConfig) -> Result<Vec<ModuleCheck>> {
    match only {
        Some(m) => Ok(vec![check_module(m, cfg)?]),
        None => MODULES.iter().map(|m| check_module(m, cfg)).collect(),
    }
}
