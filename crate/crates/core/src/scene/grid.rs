use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, Result};

pub const EMPTY: u8 = 0;
pub const UNKNOWN: u8 = 255;

/// Placement of a voxel lattice in the grid frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub origin_m: [f64; 3],
    pub voxel_size_m: f64,
}

impl GridSpec {
    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn index(&self, v: [usize; 3]) -> usize {
        (v[0] * self.dims[1] + v[1]) * self.dims[2] + v[2]
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let z = index % self.dims[2];
        let y = (index / self.dims[2]) % self.dims[1];
        [index / (self.dims[1] * self.dims[2]), y, z]
    }

    pub fn voxel_center(&self, v: [usize; 3]) -> [f64; 3] {
        let vs = self.voxel_size_m;
        [
            self.origin_m[0] + (v[0] as f64 + 0.5) * vs,
            self.origin_m[1] + (v[1] as f64 + 0.5) * vs,
            self.origin_m[2] + (v[2] as f64 + 0.5) * vs,
        ]
    }

    /// Voxel containing a grid-frame point, if inside the grid.
    pub fn locate(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = (p[a] - self.origin_m[a]) / self.voxel_size_m;
            if !(f >= 0.0) {
                return None;
            }
            let i = crate::math::floor(f) as usize;
            if i >= self.dims[a] {
                return None;
            }
            out[a] = i;
        }
        Some(out)
    }

    /// Continuous lattice coordinates (voxel centres at integers).
    pub fn lattice_coords(&self, p: [f64; 3]) -> [f64; 3] {
        let vs = self.voxel_size_m;
        [
            (p[0] - self.origin_m[0]) / vs - 0.5,
            (p[1] - self.origin_m[1]) / vs - 0.5,
            (p[2] - self.origin_m[2]) / vs - 0.5,
        ]
    }
}

/// Labelled voxel lattice, stored `[X, Y, Z]` row-major (z fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    pub origin_m: [f64; 3],
    pub voxel_size_m: f64,
    pub labels: Vec<u8>,
}

impl VoxelGrid {
    pub fn empty(dims: [usize; 3], origin_m: [f64; 3], voxel_size_m: f64) -> Result<Self> {
        let g = Self {
            dims,
            origin_m,
            voxel_size_m,
            labels: vec![EMPTY; dims.iter().product()],
        };
        g.check_geometry()?;
        Ok(g)
    }

    fn check_geometry(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(config_err("voxel grid extents must be positive"));
        }
        if !(self.voxel_size_m > 0.0 && self.voxel_size_m.is_finite()) {
            return Err(config_err("voxel size must be positive"));
        }
        if self.labels.len() != self.num_voxels() {
            return Err(config_err("label count does not match grid extents"));
        }
        Ok(())
    }

    /// Checks geometry and that every label is `< num_classes` or unknown.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        self.check_geometry()?;
        if let Some(bad) = self
            .labels
            .iter()
            .find(|&&l| l != UNKNOWN && l as usize >= num_classes)
        {
            return Err(config_err(alloc::format!("label {bad} outside {num_classes} classes")));
        }
        Ok(())
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            dims: self.dims,
            origin_m: self.origin_m,
            voxel_size_m: self.voxel_size_m,
        }
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        self.spec().index([x, y, z])
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        self.spec().coords(index)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, label: u8) {
        let i = self.index(x, y, z);
        self.labels[i] = label;
    }

    pub fn is_solid(label: u8) -> bool {
        label != EMPTY && label != UNKNOWN
    }

    pub fn voxel_center(&self, v: [usize; 3]) -> [f64; 3] {
        self.spec().voxel_center(v)
    }

    pub fn locate(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        self.spec().locate(p)
    }

    pub fn count_label(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Fraction of known voxels that are occupied.
    pub fn occupancy_fraction(&self) -> f64 {
        let known = self.labels.iter().filter(|&&l| l != UNKNOWN).count();
        if known == 0 {
            return 0.0;
        }
        let solid = self.labels.iter().filter(|&&l| Self::is_solid(l)).count();
        solid as f64 / known as f64
    }
}
