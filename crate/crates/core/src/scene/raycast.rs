use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::scene::{CameraPose, CameraRig, VoxelGrid};
use crate::tensor::Tensor;

/// Per-pixel first-hit information, pixels in row-major `[H, W]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct RaycastResult {
    /// z-depth in meters, 0 for no hit.
    pub depth: Tensor,
    pub hits: Vec<Option<[usize; 3]>>,
}

impl RaycastResult {
    pub fn hit_count(&self) -> usize {
        self.hits.iter().filter(|h| h.is_some()).count()
    }
}

/// Walks the ray `origin + t·dir` through the grid with a 3D DDA and returns
/// the entry parameter and index of the first solid voxel.
pub(crate) fn trace(grid: &VoxelGrid, origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, [usize; 3])> {
    let vs = grid.voxel_size_m;
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for a in 0..3 {
        let lo = grid.origin_m[a];
        let hi = lo + grid.dims[a] as f64 * vs;
        if dir[a] == 0.0 {
            if origin[a] < lo || origin[a] > hi {
                return None;
            }
            continue;
        }
        let t1 = (lo - origin[a]) / dir[a];
        let t2 = (hi - origin[a]) / dir[a];
        t_enter = t_enter.max(t1.min(t2));
        t_exit = t_exit.min(t1.max(t2));
    }
    let t_start = t_enter.max(0.0);
    if t_start >= t_exit {
        return None;
    }

    let mut idx = [0isize; 3];
    let mut step = [0isize; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let p = origin[a] + t_start * dir[a];
        let f = crate::math::floor((p - grid.origin_m[a]) / vs) as isize;
        idx[a] = f.clamp(0, grid.dims[a] as isize - 1);
        if dir[a] > 0.0 {
            step[a] = 1;
            let boundary = grid.origin_m[a] + (idx[a] + 1) as f64 * vs;
            t_max[a] = (boundary - origin[a]) / dir[a];
            t_delta[a] = vs / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            let boundary = grid.origin_m[a] + idx[a] as f64 * vs;
            t_max[a] = (boundary - origin[a]) / dir[a];
            t_delta[a] = -vs / dir[a];
        }
    }

    let mut t = t_start;
    loop {
        let v = [idx[0] as usize, idx[1] as usize, idx[2] as usize];
        if VoxelGrid::is_solid(grid.get(v[0], v[1], v[2])) {
            return Some((t, v));
        }
        let t_next = t_max[0].min(t_max[1]).min(t_max[2]);
        if !t_next.is_finite() {
            return None;
        }
        // Crossings within `tie` of each other are one crossing through an
        // edge or corner, so the ray skips the voxels it only touches.
        let tie = 1e-10 * vs;
        t = t_next;
        for a in 0..3 {
            if t_max[a] - t_next <= tie {
                idx[a] += step[a];
                if idx[a] < 0 || idx[a] >= grid.dims[a] as isize {
                    return None;
                }
                t_max[a] += t_delta[a];
            }
        }
    }
}

/// Depth map and first-hit voxels for every pixel of the rig.
pub fn raycast(grid: &VoxelGrid, rig: &CameraRig, pose: &CameraPose) -> Result<RaycastResult> {
    rig.validate()?;
    pose.validate()?;
    let mut depth = vec![0.0; rig.num_pixels()];
    let mut hits = vec![None; rig.num_pixels()];
    for r in 0..rig.image_h {
        for c in 0..rig.image_w {
            let dir = pose.camera_to_grid_dir(rig.pixel_ray(r, c));
            if let Some((t, v)) = trace(grid, pose.position, dir) {
                let p = r * rig.image_w + c;
                depth[p] = t;
                hits[p] = Some(v);
            }
        }
    }
    Ok(RaycastResult {
        depth: Tensor::new(vec![rig.image_h, rig.image_w], depth)?,
        hits,
    })
}

pub fn raycast_depth(grid: &VoxelGrid, rig: &CameraRig, pose: &CameraPose) -> Result<Tensor> {
    Ok(raycast(grid, rig, pose)?.depth)
}
