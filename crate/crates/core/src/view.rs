//! 2D-to-3D view transformation.
//!
//! Context features are lifted into a camera frustum weighted by the depth
//! distribution and splatted into voxels (`F_lss`). Voxels hit by the depth
//! map become queries that gather frustum features with learned sampling
//! offsets, then exchange information among themselves, and are scattered
//! into a sparse volume (`F_vt`).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::depth::DepthBinSpec;
use crate::error::{config_err, dim_err, Result};
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::param::ParamStore;
use crate::scene::{CameraPose, CameraRig, GridSpec};
use crate::tensor::Tensor;

/// Outer product `G[c, d, h, w] = context[c, h, w] · probs[d, h, w]`.
pub fn lift(g: &mut Graph, context: Var, probs: Var) -> Result<Var> {
    let cs = g.shape(context).to_vec();
    let ps = g.shape(probs).to_vec();
    if cs.len() != 3 || ps.len() != 3 || cs[1..] != ps[1..] {
        return Err(dim_err("lift", &cs, &ps));
    }
    let c = g.reshape(context, &[cs[0], 1, cs[1], cs[2]])?;
    let p = g.reshape(probs, &[1, ps[0], ps[1], ps[2]])?;
    g.mul(c, p)
}

/// Grid-frame position of every `(bin, row, col)` frustum cell, `[D, H, W, 3]`.
pub fn frustum_points(rig: &CameraRig, pose: &CameraPose, bins: &DepthBinSpec) -> Tensor {
    let centers = bins.centers();
    Tensor::from_fn(&[bins.num_bins, rig.image_h, rig.image_w, 3], |i| {
        pose.unproject(rig, i[1], i[2], centers[i[0]])[i[3]]
    })
}

/// Voxel index of every frustum cell, `None` when it falls outside the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FrustumIndex {
    pub voxel: Vec<Option<usize>>,
    pub dropped: usize,
}

pub fn frustum_index(points: &Tensor, grid: &GridSpec) -> Result<FrustumIndex> {
    if points.rank() != 4 || points.shape()[3] != 3 {
        return Err(dim_err("frustum_index", points.shape(), &[3]));
    }
    let voxel: Vec<Option<usize>> = points
        .data()
        .chunks_exact(3)
        .map(|p| grid.locate([p[0], p[1], p[2]]).map(|v| grid.index(v)))
        .collect();
    let dropped = voxel.iter().filter(|v| v.is_none()).count();
    Ok(FrustumIndex { voxel, dropped })
}

/// Sum-pools frustum features `[C, D, H, W]` into a `[C, X, Y, Z]` volume.
pub fn voxel_pool(g: &mut Graph, frustum: Var, index: &FrustumIndex, grid: &GridSpec) -> Result<Var> {
    let s = g.shape(frustum).to_vec();
    let cells: usize = s[1..].iter().product();
    if s.len() != 4 || cells != index.voxel.len() {
        return Err(dim_err("voxel_pool", &s, &[index.voxel.len()]));
    }
    let flat = g.reshape(frustum, &[s[0], cells])?;
    let pooled = g.scatter_add(flat, 1, &index.voxel, grid.num_voxels())?;
    g.reshape(pooled, &[s[0], grid.dims[0], grid.dims[1], grid.dims[2]])
}

/// Unique voxels hit by the depth map, nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryProposals {
    pub voxels: Vec<[usize; 3]>,
    pub flat: Vec<usize>,
    /// Smallest ray depth that reached each voxel.
    pub depth: Vec<f64>,
    /// Hit voxels discarded because the cap was reached.
    pub truncated: usize,
}

impl QueryProposals {
    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }
}

pub fn default_query_cap(grid: &GridSpec) -> usize {
    (grid.num_voxels() / 4).max(1)
}

/// Unprojects every hit pixel of `depth: [H, W]` and keeps up to `cap` of the
/// distinct voxels reached, nearest to the camera first.
pub fn propose_queries(
    depth: &Tensor,
    rig: &CameraRig,
    pose: &CameraPose,
    grid: &GridSpec,
    cap: usize,
) -> Result<QueryProposals> {
    if depth.shape() != [rig.image_h, rig.image_w] {
        return Err(dim_err("propose_queries", depth.shape(), &[rig.image_h, rig.image_w]));
    }
    if cap > grid.num_voxels() {
        return Err(config_err(format!(
            "query cap {cap} exceeds {} voxels",
            grid.num_voxels()
        )));
    }
    let nudge = 1e-9 * grid.voxel_size_m;
    let mut best = vec![f64::INFINITY; grid.num_voxels()];
    for r in 0..rig.image_h {
        for c in 0..rig.image_w {
            let z = depth.data()[r * rig.image_w + c];
            if !(z > 0.0) {
                continue;
            }
            if let Some(v) = grid.locate(pose.unproject(rig, r, c, z + nudge)) {
                let i = grid.index(v);
                best[i] = best[i].min(z);
            }
        }
    }
    let mut hits: Vec<(f64, usize)> = best
        .iter()
        .enumerate()
        .filter(|(_, d)| d.is_finite())
        .map(|(i, &d)| (d, i))
        .collect();
    hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let truncated = hits.len().saturating_sub(cap);
    hits.truncate(cap);
    Ok(QueryProposals {
        voxels: hits.iter().map(|&(_, i)| grid.coords(i)).collect(),
        flat: hits.iter().map(|&(_, i)| i).collect(),
        depth: hits.iter().map(|&(d, _)| d).collect(),
        truncated,
    })
}

/// Rows of `volume: [C, X, Y, Z]` at the proposal voxels, `[Nq, C]`.
pub fn gather_queries(g: &mut Graph, volume: Var, proposals: &QueryProposals) -> Result<Var> {
    let s = g.shape(volume).to_vec();
    let flat = g.reshape(volume, &[s[0], s[1] * s[2] * s[3]])?;
    let picked = g.index_select(flat, 1, &proposals.flat)?;
    g.permute(picked, &[1, 0])
}

/// Scatters query rows `[Nq, C]` into a zero `[C, X, Y, Z]` volume.
pub fn scatter_queries(g: &mut Graph, queries: Var, proposals: &QueryProposals, grid: &GridSpec) -> Result<Var> {
    let c = g.shape(queries)[1];
    let cols = g.permute(queries, &[1, 0])?;
    let index: Vec<Option<usize>> = proposals.flat.iter().map(|&i| Some(i)).collect();
    let vol = g.scatter_add(cols, 1, &index, grid.num_voxels())?;
    g.reshape(vol, &[c, grid.dims[0], grid.dims[1], grid.dims[2]])
}

/// Continuous frustum bin coordinate of depth `z` (bin centres at integers)
/// and its derivative, linear between centres and extrapolated at the ends.
fn bin_coordinate(centers: &[f64], z: f64) -> (f64, f64) {
    let n = centers.len();
    let seg = if z <= centers[0] {
        0
    } else if z >= centers[n - 1] {
        n - 2
    } else {
        centers.partition_point(|&c| c <= z) - 1
    };
    let width = centers[seg + 1] - centers[seg];
    (seg as f64 + (z - centers[seg]) / width, 1.0 / width)
}

/// Per-query sampling anchors for both refinement rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryGeometry {
    /// Frustum coordinates `(bin, row, col)` of each query centre, `[Nq, 1, 3]`.
    pub frustum_base: Tensor,
    /// Transposed Jacobian of frustum coordinates w.r.t. a one-voxel
    /// displacement, `[Nq, 3, 3]`.
    pub frustum_jacobian_t: Tensor,
    /// Lattice coordinates of each query centre, `[Nq, 1, 3]`.
    pub lattice_base: Tensor,
}

pub fn query_geometry(
    proposals: &QueryProposals,
    rig: &CameraRig,
    pose: &CameraPose,
    bins: &DepthBinSpec,
    grid: &GridSpec,
) -> Result<QueryGeometry> {
    let nq = proposals.len().max(1);
    let centers = bins.centers();
    let mut base = Tensor::zeros(&[nq, 1, 3]);
    let mut jt = Tensor::zeros(&[nq, 3, 3]);
    let mut lattice = Tensor::zeros(&[nq, 1, 3]);
    let m = &pose.rotation;
    for (q, v) in proposals.voxels.iter().enumerate() {
        let center = grid.voxel_center(*v);
        let [x, y, z] = pose.grid_to_camera(center);
        if z <= 0.0 {
            return Err(config_err(format!("query voxel {v:?} lies behind the camera")));
        }
        let (bin, dbin) = bin_coordinate(&centers, z);
        let row = rig.fy * y / z + rig.cy - 0.5;
        let col = rig.fx * x / z + rig.cx - 0.5;
        let a = [
            [0.0, 0.0, dbin],
            [0.0, rig.fy / z, -rig.fy * y / (z * z)],
            [rig.fx / z, 0.0, -rig.fx * x / (z * z)],
        ];
        for (i, val) in [bin, row, col].into_iter().enumerate() {
            base.set(&[q, 0, i], val);
        }
        for i in 0..3 {
            for r in 0..3 {
                let d: f64 = (0..3).map(|c| a[i][c] * m[r][c]).sum();
                jt.set(&[q, r, i], d * grid.voxel_size_m);
            }
        }
        let l = grid.lattice_coords(center);
        for i in 0..3 {
            lattice.set(&[q, 0, i], l[i]);
        }
    }
    Ok(QueryGeometry {
        frustum_base: base,
        frustum_jacobian_t: jt,
        lattice_base: lattice,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub channels: usize,
    pub num_points: usize,
    /// Offset bound in voxels.
    pub max_offset: f64,
    pub self_round: bool,
}

impl RefineConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            num_points: 4,
            max_offset: 2.0,
            self_round: true,
        }
    }
}

/// One deformable sampling round: offsets, weights and output projection.
#[derive(Debug, Clone)]
pub struct RefineRound {
    pub offsets: Linear,
    pub weights: Linear,
    pub output: Linear,
}

impl RefineRound {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &RefineConfig, rng: &mut R) -> Self {
        let (c, k) = (cfg.channels, cfg.num_points);
        Self {
            offsets: Linear::new(store, &format!("{prefix}.offsets"), c, 3 * k, rng),
            weights: Linear::new(store, &format!("{prefix}.weights"), c, k, rng),
            output: Linear::new(store, &format!("{prefix}.output"), c, c, rng),
        }
    }

    /// Zeroes the offset and weight heads: no displacement, uniform weights.
    pub fn zero_heads(&self, store: &mut ParamStore) {
        self.offsets.zero(store);
        self.weights.zero(store);
    }

    /// `queries + W_out · Σ_k w_k · sample(volume, base + J·offset_k)`.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &RefineConfig,
        queries: Var,
        volume: Var,
        base: &Tensor,
        jacobian_t: Option<&Tensor>,
    ) -> Result<Var> {
        let nq = g.shape(queries)[0];
        let (c, k) = (cfg.channels, cfg.num_points);
        let raw = self.offsets.forward(g, store, queries)?;
        let raw = g.tanh(raw)?;
        let off = g.scale(raw, cfg.max_offset)?;
        let off = g.reshape(off, &[nq, k, 3])?;
        let off = match jacobian_t {
            Some(jt) => {
                let jt = g.constant(jt.clone());
                g.matmul(off, jt)?
            }
            None => off,
        };
        let base = g.constant(base.clone());
        let coords = g.add(off, base)?;
        let coords = g.reshape(coords, &[nq * k, 3])?;
        let samples = g.trilinear_sample(volume, coords)?;
        let samples = g.reshape(samples, &[nq, k, c])?;
        let logits = self.weights.forward(g, store, queries)?;
        let w = g.softmax(logits, 1)?;
        let w = g.reshape(w, &[nq, k, 1])?;
        let weighted = g.mul(samples, w)?;
        let mean = g.mean(weighted, &[1])?;
        let agg = g.scale(mean, k as f64)?;
        let agg = g.reshape(agg, &[nq, c])?;
        let delta = self.output.forward(g, store, agg)?;
        g.add(queries, delta)
    }
}

/// Query refinement: cross round over the frustum and an optional self
/// round over the sparse query volume.
#[derive(Debug, Clone)]
pub struct VoxelRefiner {
    pub cfg: RefineConfig,
    pub cross: RefineRound,
    pub self_attn: Option<RefineRound>,
}

impl VoxelRefiner {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: RefineConfig, rng: &mut R) -> Result<Self> {
        if cfg.channels == 0 || cfg.num_points == 0 || !(cfg.max_offset >= 0.0) {
            return Err(config_err("refiner needs positive channels and sampling points"));
        }
        let cross = RefineRound::new(store, &format!("{prefix}.cross"), &cfg, rng);
        let self_attn = cfg
            .self_round
            .then(|| RefineRound::new(store, &format!("{prefix}.self"), &cfg, rng));
        Ok(Self { cfg, cross, self_attn })
    }

    /// Refined queries scattered into a `[C, X, Y, Z]` volume that is zero
    /// outside the proposals.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        frustum: Var,
        proposals: &QueryProposals,
        geom: &QueryGeometry,
        grid: &GridSpec,
    ) -> Result<Var> {
        if proposals.is_empty() {
            let [x, y, z] = grid.dims;
            return Ok(g.constant(Tensor::zeros(&[self.cfg.channels, x, y, z])));
        }
        let mut q = self.cross.forward(
            g,
            store,
            &self.cfg,
            queries,
            frustum,
            &geom.frustum_base,
            Some(&geom.frustum_jacobian_t),
        )?;
        if let Some(round) = &self.self_attn {
            let vol = scatter_queries(g, q, proposals, grid)?;
            q = round.forward(g, store, &self.cfg, q, vol, &geom.lattice_base, None)?;
        }
        scatter_queries(g, q, proposals, grid)
    }
}
