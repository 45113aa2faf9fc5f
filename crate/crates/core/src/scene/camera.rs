use crate::error::{config_err, Result};
use crate::scene::VoxelGrid;

/// Pinhole intrinsics of the rectified left camera plus the stereo baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraRig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub baseline_m: f64,
    pub image_h: usize,
    pub image_w: usize,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            fx: 24.0,
            fy: 24.0,
            cx: 24.0,
            cy: 12.0,
            baseline_m: 0.5,
            image_h: 24,
            image_w: 48,
        }
    }
}

impl CameraRig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.baseline_m]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 || self.baseline_m <= 0.0 {
            return Err(config_err("camera focal lengths and baseline must be positive"));
        }
        if self.image_h == 0 || self.image_w == 0 {
            return Err(config_err("image extents must be positive"));
        }
        if !(0.0..self.image_w as f64).contains(&self.cx) || !(0.0..self.image_h as f64).contains(&self.cy) {
            return Err(config_err("principal point must lie inside the image"));
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.image_h * self.image_w
    }

    /// Camera-frame direction through the centre of pixel `(row, col)`,
    /// scaled so its forward component is 1 (the ray parameter is z-depth).
    pub fn pixel_ray(&self, row: usize, col: usize) -> [f64; 3] {
        self.ray_at(row as f64 + 0.5, col as f64 + 0.5)
    }

    pub fn ray_at(&self, v: f64, u: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }

    /// Projects a camera-frame point to continuous pixel-centre indices
    /// `(row, col)`, where integer values hit pixel centres.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        if p[2] <= 0.0 {
            return None;
        }
        let u = self.fx * p[0] / p[2] + self.cx - 0.5;
        let v = self.fy * p[1] / p[2] + self.cy - 0.5;
        Some((v, u))
    }
}

/// Camera-to-grid rigid transform. Rotation columns are the camera's right,
/// down and forward axes expressed in grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub position: [f64; 3],
    pub rotation: [[f64; 3]; 3],
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    crate::math::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])
}

fn normalized(a: [f64; 3]) -> Option<[f64; 3]> {
    let n = norm(a);
    (n > 1e-12 && n.is_finite()).then(|| [a[0] / n, a[1] / n, a[2] / n])
}

impl CameraPose {
    /// Pose at `position` looking along `forward` with image "up" towards `up`.
    pub fn look_along(position: [f64; 3], forward: [f64; 3], up: [f64; 3]) -> Result<Self> {
        let f = normalized(forward).ok_or_else(|| config_err("camera forward vector is degenerate"))?;
        let r = normalized(cross(f, up)).ok_or_else(|| config_err("camera up vector is parallel to forward"))?;
        let d = cross(f, r);
        Ok(Self {
            position,
            rotation: [[r[0], d[0], f[0]], [r[1], d[1], f[1]], [r[2], d[2], f[2]]],
        })
    }

    /// Camera on the grid's `x = min` face, centred in `y`, at 55% of the
    /// grid height, looking along `+x` with `+z` up.
    pub fn canonical(grid: &VoxelGrid) -> Self {
        let vs = grid.voxel_size_m;
        let position = [
            grid.origin_m[0],
            grid.origin_m[1] + 0.5 * grid.dims[1] as f64 * vs,
            grid.origin_m[2] + 0.55 * grid.dims[2] as f64 * vs,
        ];
        Self::look_along(position, [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]).expect("canonical axes are orthogonal")
    }

    pub fn forward(&self) -> [f64; 3] {
        [self.rotation[0][2], self.rotation[1][2], self.rotation[2][2]]
    }

    pub fn validate(&self) -> Result<()> {
        if normalized(self.forward()).is_none() || !self.position.iter().all(|v| v.is_finite()) {
            return Err(config_err("camera pose has a degenerate forward vector"));
        }
        Ok(())
    }

    pub fn camera_to_grid_dir(&self, d: [f64; 3]) -> [f64; 3] {
        let m = &self.rotation;
        [
            m[0][0] * d[0] + m[0][1] * d[1] + m[0][2] * d[2],
            m[1][0] * d[0] + m[1][1] * d[1] + m[1][2] * d[2],
            m[2][0] * d[0] + m[2][1] * d[1] + m[2][2] * d[2],
        ]
    }

    pub fn grid_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let q = [
            p[0] - self.position[0],
            p[1] - self.position[1],
            p[2] - self.position[2],
        ];
        let m = &self.rotation;
        [
            m[0][0] * q[0] + m[1][0] * q[1] + m[2][0] * q[2],
            m[0][1] * q[0] + m[1][1] * q[1] + m[2][1] * q[2],
            m[0][2] * q[0] + m[1][2] * q[1] + m[2][2] * q[2],
        ]
    }

    /// Grid-frame point at z-depth `depth` along the ray through continuous
    /// pixel coordinates.
    pub fn unproject(&self, rig: &CameraRig, row: usize, col: usize, depth: f64) -> [f64; 3] {
        let d = self.camera_to_grid_dir(rig.pixel_ray(row, col));
        [
            self.position[0] + depth * d[0],
            self.position[1] + depth * d[1],
            self.position[2] + depth * d[2],
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_along_builds_right_handed_frame() {
        let p = CameraPose::look_along([0.0; 3], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(p.camera_to_grid_dir([1.0, 0.0, 0.0]), [0.0, -1.0, 0.0]);
        assert_eq!(p.camera_to_grid_dir([0.0, 1.0, 0.0]), [0.0, 0.0, -1.0]);
        assert_eq!(p.grid_to_camera([2.0, 0.0, 0.0]), [0.0, 0.0, 2.0]);
    }

    #[test]
    fn zero_forward_is_rejected() {
        assert!(CameraPose::look_along([0.0; 3], [0.0; 3], [0.0, 0.0, 1.0]).is_err());
        let mut p = CameraPose::look_along([0.0; 3], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]).unwrap();
        for row in &mut p.rotation {
            row[2] = 0.0;
        }
        assert!(p.validate().is_err());
    }

    #[test]
    fn project_inverts_pixel_ray() {
        let rig = CameraRig {
            fx: 24.0,
            fy: 20.0,
            cx: 24.0,
            cy: 12.0,
            baseline_m: 0.5,
            image_h: 24,
            image_w: 48,
        };
        let r = rig.pixel_ray(5, 31);
        let (v, u) = rig.project([r[0] * 3.0, r[1] * 3.0, 3.0]).unwrap();
        assert!((v - 5.0).abs() < 1e-12 && (u - 31.0).abs() < 1e-12);
    }
}
