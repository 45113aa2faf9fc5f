use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};
use crate::scene::{CameraPose, CameraRig, VoxelGrid, UNKNOWN};

/// Class used for the ground plane.
pub const GROUND_CLASS: u8 = 1;
const MIN_BOXES: usize = 2;
const MAX_BOXES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub dims: [usize; 3],
    pub num_classes: usize,
    pub voxel_size_m: f64,
    pub origin_m: [f64; 3],
}

impl SceneSpec {
    pub fn new(dims: [usize; 3], num_classes: usize) -> Self {
        Self {
            dims,
            num_classes,
            voxel_size_m: 0.25,
            origin_m: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 4) {
            return Err(config_err(alloc::format!(
                "grid extents {:?} must each be at least 4",
                self.dims
            )));
        }
        if !(2..=20).contains(&self.num_classes) {
            return Err(config_err(alloc::format!(
                "num_classes {} outside [2, 20]",
                self.num_classes
            )));
        }
        if !(self.voxel_size_m > 0.0 && self.voxel_size_m.is_finite()) {
            return Err(config_err("voxel size must be positive"));
        }
        Ok(())
    }
}

/// Axis-aligned box, half-open voxel ranges `[min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
    pub class: u8,
}

/// Box layout for `seed`; boxes rest on the ground layer and never start in
/// the first eighth of the grid along `x`.
pub fn layout_boxes(seed: u64, spec: &SceneSpec) -> Result<Vec<SceneBox>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let [nx, ny, nz] = spec.dims;
    let count = rng.random_range(MIN_BOXES..=MAX_BOXES);
    let first_class = if spec.num_classes > 2 { 2 } else { 1 };
    let mut boxes = Vec::with_capacity(count);
    for _ in 0..count {
        let sx = rng.random_range(2..=(nx / 4).max(2));
        let sy = rng.random_range(2..=(ny / 4).max(2));
        let sz = rng.random_range(1..=(nz / 2).max(1));
        let x0 = rng.random_range(nx / 8..=nx - sx);
        let y0 = rng.random_range(0..=ny - sy);
        let class = rng.random_range(first_class..spec.num_classes) as u8;
        boxes.push(SceneBox {
            min: [x0, y0, 1],
            max: [x0 + sx, y0 + sy, (1 + sz).min(nz)],
            class,
        });
    }
    Ok(boxes)
}

/// Ground plane on the lowest layer plus 2 to 8 random boxes.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<VoxelGrid> {
    let boxes = layout_boxes(seed, spec)?;
    let mut grid = VoxelGrid::empty(spec.dims, spec.origin_m, spec.voxel_size_m)?;
    for x in 0..spec.dims[0] {
        for y in 0..spec.dims[1] {
            grid.set(x, y, 0, GROUND_CLASS);
        }
    }
    for b in &boxes {
        for x in b.min[0]..b.max[0] {
            for y in b.min[1]..b.max[1] {
                for z in b.min[2]..b.max[2] {
                    grid.set(x, y, z, b.class);
                }
            }
        }
    }
    Ok(grid)
}

/// Marks every voxel lying entirely outside the camera frustum as unknown,
/// testing its corners, edge midpoints and centre. Returns the number of
/// voxels marked.
pub fn mark_unobservable(grid: &mut VoxelGrid, rig: &CameraRig, pose: &CameraPose) -> Result<usize> {
    rig.validate()?;
    pose.validate()?;
    let (h, w) = (rig.image_h as f64, rig.image_w as f64);
    let vs = grid.voxel_size_m;
    let mut marked = 0;
    for i in 0..grid.num_voxels() {
        if grid.labels[i] == UNKNOWN {
            continue;
        }
        let v = grid.coords(i);
        let mut visible = false;
        'probe: for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    let p = [
                        grid.origin_m[0] + (v[0] as f64 + 0.5 * a as f64) * vs,
                        grid.origin_m[1] + (v[1] as f64 + 0.5 * b as f64) * vs,
                        grid.origin_m[2] + (v[2] as f64 + 0.5 * c as f64) * vs,
                    ];
                    if let Some((r, u)) = rig.project(pose.grid_to_camera(p)) {
                        if (-0.5..h - 0.5).contains(&r) && (-0.5..w - 0.5).contains(&u) {
                            visible = true;
                            break 'probe;
                        }
                    }
                }
            }
        }
        if !visible {
            grid.labels[i] = UNKNOWN;
            marked += 1;
        }
    }
    Ok(marked)
}
