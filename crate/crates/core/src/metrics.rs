//! Voxel IoU and mIoU with unknown-voxel masking.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, dim_err, Result};
use crate::scene::{VoxelGrid, EMPTY, UNKNOWN};
use crate::tensor::Tensor;

/// Counts indexed `[gt][pred]` over `num_classes` labels (0 = empty).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every voxel whose ground truth is known.
    pub fn accumulate(&mut self, pred: &VoxelGrid, gt: &VoxelGrid) -> Result<()> {
        if pred.dims != gt.dims {
            return Err(dim_err("evaluate", &pred.dims, &gt.dims));
        }
        let k = self.num_classes;
        for (&p, &t) in pred.labels.iter().zip(&gt.labels) {
            if t == UNKNOWN {
                continue;
            }
            if p as usize >= k || t as usize >= k {
                return Err(config_err(format!("label pair ({t}, {p}) outside {k} classes")));
            }
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(config_err("confusion matrices have different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Scores derived from the counts.
    ///
    /// A class (or the occupied/empty split) with no ground truth and no
    /// prediction has no IoU; `iou` and `miou` are 1 when nothing is there to
    /// find and nothing was predicted.
    pub fn metrics(&self) -> Metrics {
        let k = self.num_classes;
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for t in 0..k {
            for p in 0..k {
                let n = self.get(t, p);
                match (t as u8 != EMPTY, p as u8 != EMPTY) {
                    (true, true) => tp += n,
                    (false, true) => fp += n,
                    (true, false) => fn_ += n,
                    (false, false) => {}
                }
            }
        }
        let ratio = |tp: u64, den: u64| if den == 0 { None } else { Some(tp as f64 / den as f64) };
        let iou = ratio(tp, tp + fp + fn_).unwrap_or(1.0);
        let mut per_class = vec![None; k];
        for (c, slot) in per_class.iter_mut().enumerate().skip(1) {
            let tp = self.get(c, c);
            let gt: u64 = (0..k).map(|p| self.get(c, p)).sum();
            let pr: u64 = (0..k).map(|t| self.get(t, c)).sum();
            *slot = ratio(tp, gt + pr - tp);
        }
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            1.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        Metrics { iou, miou, per_class }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Occupied-versus-empty IoU.
    pub iou: f64,
    /// Mean over semantic classes present in ground truth or prediction.
    pub miou: f64,
    /// Indexed by class; entry 0 (empty) is always `None`.
    pub per_class: Vec<Option<f64>>,
}

pub fn evaluate(pred: &VoxelGrid, gt: &VoxelGrid, num_classes: usize) -> Result<Metrics> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred, gt)?;
    Ok(cm.metrics())
}

/// Per-voxel argmax of `scores: [K, X, Y, Z]` as a label grid placed like `like`.
pub fn argmax_labels(scores: &Tensor, like: &VoxelGrid) -> Result<VoxelGrid> {
    if scores.rank() != 4 || scores.shape()[1..] != like.dims {
        return Err(dim_err("argmax_labels", scores.shape(), &like.dims));
    }
    let k = scores.shape()[0];
    let n = like.num_voxels();
    let d = scores.data();
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if d[c * n + i] > d[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Ok(VoxelGrid {
        labels,
        ..like.clone()
    })
}

/// Expected mIoU of a predictor drawing every label uniformly from the
/// `num_classes` classes, approximated per class as the ratio of the
/// expected intersection to the expected union over the known voxels of
/// `gts`.
pub fn random_baseline_miou(gts: &[&VoxelGrid], num_classes: usize) -> f64 {
    let mut counts = vec![0u64; num_classes];
    for g in gts {
        for &l in &g.labels {
            if (l as usize) < num_classes {
                counts[l as usize] += 1;
            }
        }
    }
    let n: u64 = counts.iter().sum();
    let k = num_classes as f64;
    let ious: Vec<f64> = counts
        .iter()
        .skip(1)
        .filter(|&&c| c > 0)
        .map(|&c| {
            let c = c as f64;
            (c / k) / (c + n as f64 / k - c / k)
        })
        .collect();
    if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}
