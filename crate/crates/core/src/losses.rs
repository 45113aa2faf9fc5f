//! Training objective: depth, 2D segmentation, class-weighted voxel
//! cross-entropy and the two scene-class affinity terms.

use alloc::vec;
use alloc::vec::Vec;


use crate::math;
use crate::depth::DepthBinSpec;
use crate::error::{config_err, dim_err, Result};
use crate::graph::{Graph, Var};
use crate::scene::{VoxelGrid, EMPTY, UNKNOWN};
use crate::tensor::Tensor;

/// Floor applied before taking logarithms of probabilities.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_d: 0.001,
            lambda_seg: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_d >= 0.0 && self.lambda_seg >= 0.0) {
            return Err(config_err("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// A scalar loss together with how many of its terms were skipped.
#[derive(Debug, Clone, Copy)]
pub struct LossTerm {
    pub value: Var,
    /// Items (voxels, pixels or ratio terms) left out because they were
    /// undefined.
    pub skipped: usize,
    /// True when nothing could be evaluated and the loss is defined as 0.
    pub degenerate: bool,
}

fn zero_term(g: &mut Graph, skipped: usize) -> LossTerm {
    LossTerm {
        value: g.scalar(0.0),
        skipped,
        degenerate: true,
    }
}

/// Mean of `weights[y] · (−log softmax(logits)[y])` over samples with a
/// target; `logits` is `[K, ...]` and `targets` lists one entry per sample.
pub fn cross_entropy(g: &mut Graph, logits: Var, targets: &[Option<usize>], weights: Option<&[f64]>) -> Result<LossTerm> {
    let shape = g.shape(logits).to_vec();
    let k = shape[0];
    let n: usize = shape[1..].iter().product();
    if targets.len() != n || weights.is_some_and(|w| w.len() != k) {
        return Err(dim_err("cross_entropy", &shape, &[targets.len()]));
    }
    if let Some(bad) = targets.iter().flatten().find(|&&t| t >= k) {
        return Err(config_err(alloc::format!("target class {bad} outside {k} logits")));
    }
    let evaluated = targets.iter().filter(|t| t.is_some()).count();
    if evaluated == 0 {
        return Ok(zero_term(g, n));
    }
    let mut select = vec![0.0; k * n];
    for (i, t) in targets.iter().enumerate() {
        if let Some(c) = *t {
            select[c * n + i] = weights.map_or(1.0, |w| w[c]);
        }
    }
    let flat = g.reshape(logits, &[k, n])?;
    let logp = g.log_softmax(flat, 0)?;
    let mask = g.constant(Tensor::new(vec![k, n], select)?);
    let picked = g.mul(logp, mask)?;
    let total = g.sum(picked)?;
    Ok(LossTerm {
        value: g.scale(total, -1.0 / evaluated as f64)?,
        skipped: n - evaluated,
        degenerate: false,
    })
}

/// Fraction of known voxels of each class over `grids`.
pub fn class_frequencies(grids: &[&VoxelGrid], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    for g in grids {
        for &l in &g.labels {
            if (l as usize) < num_classes {
                counts[l as usize] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

/// `1 / ln(1.02 + f)` for each class frequency `f`.
pub fn class_weights(frequencies: &[f64]) -> Vec<f64> {
    frequencies.iter().map(|f| 1.0 / math::ln(1.02 + f)).collect()
}

fn voxel_targets(target: &VoxelGrid) -> Vec<Option<usize>> {
    target
        .labels
        .iter()
        .map(|&l| (l != UNKNOWN).then_some(l as usize))
        .collect()
}

fn check_volume(g: &Graph, v: Var, target: &VoxelGrid, op: &'static str) -> Result<usize> {
    let s = g.shape(v);
    if s.len() != 4 || s[1..] != target.dims {
        return Err(dim_err(op, s, &target.dims));
    }
    Ok(s[0])
}

/// Class-weighted voxel cross-entropy; unknown voxels are excluded.
pub fn weighted_ce(g: &mut Graph, logits: Var, target: &VoxelGrid, class_weights: &[f64]) -> Result<LossTerm> {
    let k = check_volume(g, logits, target, "weighted_ce")?;
    if class_weights.len() != k {
        return Err(dim_err("weighted_ce", &[k], &[class_weights.len()]));
    }
    cross_entropy(g, logits, &voxel_targets(target), Some(class_weights))
}

/// Unweighted pixel cross-entropy for `logits: [K, H, W]`, labels `[H, W]`.
pub fn seg_loss_2d(g: &mut Graph, logits: Var, labels: &Tensor) -> Result<LossTerm> {
    let s = g.shape(logits).to_vec();
    if s.len() != 3 || s[1..] != *labels.shape() {
        return Err(dim_err("seg_loss_2d", &s, labels.shape()));
    }
    let targets: Vec<Option<usize>> = labels.data().iter().map(|&l| Some(l as usize)).collect();
    cross_entropy(g, logits, &targets, None)
}

/// Bin-classification cross-entropy of `pred: [D, H, W]` probabilities
/// against the bins of the hit pixels of `gt_depth`.
pub fn depth_loss(g: &mut Graph, pred: Var, gt_depth: &Tensor, bins: &DepthBinSpec) -> Result<LossTerm> {
    let s = g.shape(pred).to_vec();
    if s.len() != 3 || s[0] != bins.num_bins || s[1..] != *gt_depth.shape() {
        return Err(dim_err("depth_loss", &s, gt_depth.shape()));
    }
    let pixels = gt_depth.len();
    let picks: Vec<usize> = gt_depth
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &z)| z > 0.0)
        .map(|(p, &z)| bins.bin_of(z).0 * pixels + p)
        .collect();
    if picks.is_empty() {
        return Ok(zero_term(g, pixels));
    }
    let flat = g.reshape(pred, &[bins.num_bins * pixels])?;
    let p = g.index_select(flat, 0, &picks)?;
    let p = g.clamp_min(p, LOG_FLOOR)?;
    let logp = g.ln(p)?;
    let mean = g.mean_all(logp)?;
    Ok(LossTerm {
        value: g.scale(mean, -1.0)?,
        skipped: pixels - picks.len(),
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalMode {
    /// Occupied versus empty.
    Geo,
    /// Every class, including empty.
    Sem,
}

/// Sums along the voxel axis of `[K, N]`, giving `[K, 1]`.
fn row_sums(g: &mut Graph, x: Var) -> Result<Var> {
    let n = g.shape(x)[1];
    let m = g.mean(x, &[1])?;
    g.scale(m, n as f64)
}

/// Scene-class affinity loss on per-voxel probabilities `[K, X, Y, Z]`.
///
/// For each considered class the soft precision, recall and specificity
/// are accumulated over known voxels and the loss is
/// `−mean_c (log P_c + log R_c + log S_c)`. Ratios with a zero denominator
/// are skipped and counted. In semantic mode classes absent from the
/// target are left out entirely.
pub fn scal_loss(g: &mut Graph, probs: Var, target: &VoxelGrid, mode: ScalMode) -> Result<LossTerm> {
    let k = check_volume(g, probs, target, "scal_loss")?;
    let n = target.num_voxels();
    let known: Vec<f64> = target.labels.iter().map(|&l| (l != UNKNOWN) as u8 as f64).collect();
    if known.iter().all(|&m| m == 0.0) {
        return Ok(zero_term(g, 0));
    }
    let flat = g.reshape(probs, &[k, n])?;
    let (p, classes, onehot) = match mode {
        ScalMode::Geo => {
            let empty = g.index_select(flat, 0, &[EMPTY as usize])?;
            let occupied = g.one_minus(empty)?;
            let t: Vec<f64> = target
                .labels
                .iter()
                .map(|&l| (l != UNKNOWN && l != EMPTY) as u8 as f64)
                .collect();
            (occupied, 1, t)
        }
        ScalMode::Sem => {
            let mut t = vec![0.0; k * n];
            for (i, &l) in target.labels.iter().enumerate() {
                if l != UNKNOWN {
                    t[l as usize * n + i] = 1.0;
                }
            }
            (flat, k, t)
        }
    };
    let mask_t = Tensor::new(vec![1, n], known.clone())?;
    let t_t = Tensor::new(vec![classes, n], onehot)?;
    let not_t = Tensor::from_fn(&[classes, n], |i| known[i[1]] * (1.0 - t_t.get(i)));
    let t_sum: Vec<f64> = (0..classes).map(|c| t_t.data()[c * n..(c + 1) * n].iter().sum()).collect();
    let not_t_sum: Vec<f64> = (0..classes).map(|c| not_t.data()[c * n..(c + 1) * n].iter().sum()).collect();

    let mask = g.constant(mask_t);
    let t = g.constant(t_t);
    let nt = g.constant(not_t);
    let p_known = g.mul(p, mask)?;
    let pred_sum = row_sums(g, p_known)?;
    let inter = g.mul(p, t)?;
    let inter = row_sums(g, inter)?;
    let q = g.one_minus(p)?;
    let true_neg = g.mul(q, nt)?;
    let true_neg = row_sums(g, true_neg)?;

    let pred_sum_v: Vec<f64> = g.value(pred_sum).data().to_vec();
    let mut skipped = 0;
    let mut counted = 0;
    let mut terms: Vec<Var> = Vec::new();
    let log_ratio = |g: &mut Graph, num: Var, den: Var, c: usize| -> Result<Var> {
        let a = g.index_select(num, 0, &[c])?;
        let b = g.index_select(den, 0, &[c])?;
        let r = g.div(a, b)?;
        let r = g.clamp_min(r, LOG_FLOOR)?;
        g.ln(r)
    };
    for c in 0..classes {
        if mode == ScalMode::Sem && t_sum[c] == 0.0 {
            continue;
        }
        counted += 1;
        if pred_sum_v[c] > 0.0 {
            terms.push(log_ratio(g, inter, pred_sum, c)?);
        } else {
            skipped += 1;
        }
        if t_sum[c] > 0.0 {
            let den = g.constant(Tensor::new(vec![classes, 1], t_sum.clone())?);
            terms.push(log_ratio(g, inter, den, c)?);
        } else {
            skipped += 1;
        }
        if not_t_sum[c] > 0.0 {
            let den = g.constant(Tensor::new(vec![classes, 1], not_t_sum.clone())?);
            terms.push(log_ratio(g, true_neg, den, c)?);
        } else {
            skipped += 1;
        }
    }
    if terms.is_empty() {
        return Ok(zero_term(g, skipped));
    }
    let all = g.concat(&terms, 0)?;
    let total = g.sum(all)?;
    Ok(LossTerm {
        value: g.scale(total, -1.0 / counted as f64)?,
        skipped,
        degenerate: false,
    })
}

/// The five loss components of one training sample.
#[derive(Debug, Clone, Copy)]
pub struct LossComponents {
    pub depth: Var,
    pub seg: Var,
    pub ce: Var,
    pub scal_geo: Var,
    pub scal_sem: Var,
}

/// `λ_d·L_d + λ_seg·L_seg + L_ce + L_scal_geo + L_scal_sem`.
pub fn total_loss(g: &mut Graph, c: &LossComponents, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let d = g.scale(c.depth, w.lambda_d)?;
    let s = g.scale(c.seg, w.lambda_seg)?;
    let mut t = g.add(d, s)?;
    for v in [c.ce, c.scal_geo, c.scal_sem] {
        t = g.add(t, v)?;
    }
    Ok(t)
}

/// Scalar loss values, e.g. for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub depth: f64,
    pub seg: f64,
    pub ce: f64,
    pub scal_geo: f64,
    pub scal_sem: f64,
}

impl LossValues {
    pub fn read(g: &Graph, c: &LossComponents) -> Self {
        Self {
            depth: g.value(c.depth).item(),
            seg: g.value(c.seg).item(),
            ce: g.value(c.ce).item(),
            scal_geo: g.value(c.scal_geo).item(),
            scal_sem: g.value(c.scal_sem).item(),
        }
    }

    pub fn total(&self, w: &LossWeights) -> f64 {
        w.lambda_d * self.depth + w.lambda_seg * self.seg + self.ce + self.scal_geo + self.scal_sem
    }
}
