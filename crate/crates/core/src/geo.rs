//! Depth-aware context adapter: geometry priors and decay-modulated
//! self-attention over the 2D context features.
//!
//! The attention map of each head is `softmax(QKᵀ) ⊙ β_h^{M_g}` where `M_g`
//! mixes depth and pixel distances. Blocks attend along rows and then along
//! columns; a full-image variant exists for checking that decomposition.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::math;
use crate::error::{config_err, dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorAxis {
    /// One `W×W` matrix per image row.
    Row,
    /// One `H×H` matrix per image column.
    Col,
    /// A single `HW×HW` matrix.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoPrior {
    pub axis: PriorAxis,
    pub alpha: f64,
    pub depth_rel: Tensor,
    pub spatial_rel: Tensor,
    pub combined: Tensor,
}

/// Largest token count allowed for full-image attention by default.
pub const DEFAULT_FULL_CAP: usize = 256;

/// Pairwise depth and Manhattan distances along `axis` for a depth map `[H, W]`.
pub fn build_geo_prior(depth: &Tensor, alpha: f64, axis: PriorAxis, full_cap: usize) -> Result<GeoPrior> {
    if depth.rank() != 2 {
        return Err(config_err("depth map must be [H, W]"));
    }
    if !depth.all_finite() {
        return Err(Error::NonFinite(format!("depth map passed to {axis:?} prior")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(config_err(format!("alpha {alpha} outside [0, 1]")));
    }
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    let z = depth.data();
    let (depth_rel, spatial_rel) = match axis {
        PriorAxis::Row => (
            Tensor::from_fn(&[h, w, w], |i| (z[i[0] * w + i[1]] - z[i[0] * w + i[2]]).abs()),
            Tensor::from_fn(&[h, w, w], |i| i[1].abs_diff(i[2]) as f64),
        ),
        PriorAxis::Col => (
            Tensor::from_fn(&[w, h, h], |i| (z[i[1] * w + i[0]] - z[i[2] * w + i[0]]).abs()),
            Tensor::from_fn(&[w, h, h], |i| i[1].abs_diff(i[2]) as f64),
        ),
        PriorAxis::Full => {
            let n = h * w;
            if n > full_cap {
                return Err(Error::Size(format!(
                    "full attention over {n} tokens exceeds the cap of {full_cap}"
                )));
            }
            (
                Tensor::from_fn(&[n, n], |i| (z[i[0]] - z[i[1]]).abs()),
                Tensor::from_fn(&[n, n], |i| {
                    ((i[0] / w).abs_diff(i[1] / w) + (i[0] % w).abs_diff(i[1] % w)) as f64
                }),
            )
        }
    };
    let mut combined = depth_rel.clone();
    for (c, s) in combined.data_mut().iter_mut().zip(spatial_rel.data()) {
        *c = alpha * *c + (1.0 - alpha) * s;
    }
    Ok(GeoPrior {
        axis,
        alpha,
        depth_rel,
        spatial_rel,
        combined,
    })
}

/// `(softmax(QKᵀ) ⊙ exp(M_g · ln β)) V` over the last two axes.
///
/// `q`, `k`, `v` are `[heads, ..., N, d]`; `mg` broadcasts against the
/// `[heads, ..., N, N]` score map and `log_beta` is `[heads, 1, ..., 1]`.
/// With `renormalize` each modulated row is rescaled to sum to one.
pub fn geo_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mg: Var,
    log_beta: Var,
    renormalize: bool,
) -> Result<Var> {
    let rank = g.shape(q).len();
    if rank < 2 || g.shape(k) != g.shape(q) || g.shape(v)[..rank - 1] != g.shape(q)[..rank - 1] {
        return Err(dim_err("geo_attention", g.shape(q), g.shape(k)));
    }
    let n = g.shape(q)[rank - 2];
    let mg_shape = g.shape(mg);
    if mg_shape.len() < 2 || mg_shape[mg_shape.len() - 1] != n || mg_shape[mg_shape.len() - 2] != n {
        return Err(dim_err("geo_attention prior", g.shape(q), mg_shape));
    }
    let mut perm: Vec<usize> = (0..rank).collect();
    perm.swap(rank - 2, rank - 1);
    let kt = g.permute(k, &perm)?;
    let scores = g.matmul(q, kt)?;
    let attn = g.softmax(scores, rank - 1)?;
    let log_decay = g.mul(mg, log_beta)?;
    let decay = g.exp(log_decay)?;
    let mut weights = g.mul(attn, decay)?;
    if renormalize {
        let row_mean = g.mean(weights, &[rank - 1])?;
        let row_sum = g.scale(row_mean, n as f64)?;
        weights = g.div(weights, row_sum)?;
    }
    g.matmul(weights, v)
}

/// Tensor-level [`geo_attention`] with fixed per-head decay rates.
pub fn geo_attention_tensor(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    prior: &Tensor,
    betas: &[f64],
    renormalize: bool,
) -> Result<Tensor> {
    if q.rank() != 3 || betas.len() != q.shape()[0] {
        return Err(dim_err("geo_attention", q.shape(), &[betas.len()]));
    }
    if betas.iter().any(|b| !(*b > 0.0 && *b <= 1.0)) {
        return Err(config_err("decay rates must lie in (0, 1]"));
    }
    let mut g = Graph::new();
    let (q, k, v, mg) = (
        g.constant(q.clone()),
        g.constant(k.clone()),
        g.constant(v.clone()),
        g.constant(prior.clone()),
    );
    let lb = Tensor::new(vec![betas.len(), 1, 1], betas.iter().map(|&b| math::ln(b)).collect())?;
    let lb = g.constant(lb);
    let out = geo_attention(&mut g, q, k, v, mg, lb, renormalize)?;
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GcaConfig {
    pub channels: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub num_blocks: usize,
    pub use_axial: bool,
    pub alpha_init: f64,
    pub renormalize: bool,
    pub full_cap: usize,
}

impl GcaConfig {
    pub fn new(channels: usize, num_heads: usize) -> Self {
        Self {
            channels,
            num_heads,
            head_dim: (channels / num_heads.max(1)).max(1),
            num_blocks: 2,
            use_axial: true,
            alpha_init: 0.5,
            renormalize: false,
            full_cap: DEFAULT_FULL_CAP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.channels == 0 || self.channels % self.num_heads != 0 {
            return Err(config_err(format!(
                "{} channels do not split into {} heads",
                self.channels, self.num_heads
            )));
        }
        if self.head_dim == 0 {
            return Err(config_err("head_dim must be positive"));
        }
        if !(self.alpha_init > 0.0 && self.alpha_init < 1.0) {
            return Err(config_err("alpha_init must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Initial decay rate of head `h`: `1 − 2^−(h+3)`.
pub fn decay_init(h: usize) -> f64 {
    1.0 - math::powi(2.0f64, -((h + 3) as i32))
}

fn logit(p: f64) -> f64 {
    math::ln(p / (1.0 - p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Axial,
    Full,
}

#[derive(Debug, Clone)]
pub struct GcaBlock {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub alpha_logit: ParamId,
    pub beta_logits: ParamId,
}

struct LinePriors {
    depth: Tensor,
    spatial: Tensor,
}

impl GcaBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &GcaConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let hd = cfg.num_heads * cfg.head_dim;
        let in_bound = 1.0 / math::sqrt(c as f64);
        let out_bound = 1.0 / math::sqrt(hd as f64);
        let betas: Vec<f64> = (0..cfg.num_heads).map(|h| logit(decay_init(h))).collect();
        Ok(Self {
            wq: store.add_uniform(format!("{prefix}.wq"), &[c, hd], in_bound, rng),
            wk: store.add_uniform(format!("{prefix}.wk"), &[c, hd], in_bound, rng),
            wv: store.add_uniform(format!("{prefix}.wv"), &[c, hd], in_bound, rng),
            wo: store.add_uniform(format!("{prefix}.wo"), &[hd, c], out_bound, rng),
            alpha_logit: store.add(format!("{prefix}.alpha_logit"), Tensor::scalar(logit(cfg.alpha_init))),
            beta_logits: store.add(format!("{prefix}.beta_logits"), Tensor::new(vec![cfg.num_heads], betas)?),
        })
    }

    /// Current `α` and per-head `β` values.
    pub fn mixing(&self, store: &ParamStore) -> (f64, Vec<f64>) {
        let s = |x: f64| 1.0 / (1.0 + math::exp(-x));
        let alpha = s(store.get(self.alpha_logit).value.item());
        let betas = store.get(self.beta_logits).value.data().iter().map(|&b| s(b)).collect();
        (alpha, betas)
    }

    fn prior_var(&self, g: &mut Graph, alpha: Var, p: LinePriors) -> Result<Var> {
        let md = g.constant(p.depth);
        let ms = g.constant(p.spatial);
        let a = g.mul(alpha, md)?;
        let one_minus = g.one_minus(alpha)?;
        let b = g.mul(one_minus, ms)?;
        g.add(a, b)
    }

    /// Refines `x: [C, H, W]` using depth map `[H, W]`; output has the same shape.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        depth: &Tensor,
        cfg: &GcaConfig,
        mode: AttentionMode,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != cfg.channels || depth.shape() != &shape[1..] {
            return Err(dim_err("gca_block", &shape, depth.shape()));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (heads, d) = (cfg.num_heads, cfg.head_dim);

        let tokens = g.permute(x, &[1, 2, 0])?;
        let tokens = g.reshape(tokens, &[h * w, c])?;
        let project = |g: &mut Graph, id: ParamId| -> Result<Var> {
            let wt = g.param(store, id);
            let y = g.matmul(tokens, wt)?;
            g.reshape(y, &[h, w, heads, d])
        };
        let q = project(g, self.wq)?;
        let k = project(g, self.wk)?;
        let v = project(g, self.wv)?;

        let alpha_logit = g.param(store, self.alpha_logit);
        let alpha = g.sigmoid(alpha_logit)?;
        let beta_logits = g.param(store, self.beta_logits);
        let beta = g.sigmoid(beta_logits)?;
        let log_beta = g.ln(beta)?;

        let mixed = match mode {
            AttentionMode::Axial => {
                let lb = g.reshape(log_beta, &[heads, 1, 1, 1])?;
                let row = build_geo_prior(depth, 0.5, PriorAxis::Row, cfg.full_cap)?;
                let col = build_geo_prior(depth, 0.5, PriorAxis::Col, cfg.full_cap)?;
                let row_mg = self.prior_var(g, alpha, LinePriors { depth: row.depth_rel, spatial: row.spatial_rel })?;
                let col_mg = self.prior_var(g, alpha, LinePriors { depth: col.depth_rel, spatial: col.spatial_rel })?;

                let qr = g.permute(q, &[2, 0, 1, 3])?;
                let kr = g.permute(k, &[2, 0, 1, 3])?;
                let vr = g.permute(v, &[2, 0, 1, 3])?;
                let row_out = geo_attention(g, qr, kr, vr, row_mg, lb, cfg.renormalize)?;

                let qc = g.permute(q, &[2, 1, 0, 3])?;
                let kc = g.permute(k, &[2, 1, 0, 3])?;
                let vc = g.permute(row_out, &[0, 2, 1, 3])?;
                let col_out = geo_attention(g, qc, kc, vc, col_mg, lb, cfg.renormalize)?;
                let out = g.permute(col_out, &[2, 1, 0, 3])?;
                g.reshape(out, &[h * w, heads * d])?
            }
            AttentionMode::Full => {
                let lb = g.reshape(log_beta, &[heads, 1, 1])?;
                let full = build_geo_prior(depth, 0.5, PriorAxis::Full, cfg.full_cap)?;
                let mg = self.prior_var(g, alpha, LinePriors { depth: full.depth_rel, spatial: full.spatial_rel })?;
                let flat = |g: &mut Graph, t: Var| -> Result<Var> {
                    let t = g.reshape(t, &[h * w, heads, d])?;
                    g.permute(t, &[1, 0, 2])
                };
                let (qf, kf, vf) = (flat(g, q)?, flat(g, k)?, flat(g, v)?);
                let out = geo_attention(g, qf, kf, vf, mg, lb, cfg.renormalize)?;
                let out = g.permute(out, &[1, 0, 2])?;
                g.reshape(out, &[h * w, heads * d])?
            }
        };

        let wo = g.param(store, self.wo);
        let y = g.matmul(mixed, wo)?;
        let y = g.reshape(y, &[h, w, c])?;
        let y = g.permute(y, &[2, 0, 1])?;
        g.add(x, y)
    }
}

/// Stack of [`GcaBlock`]s applied in sequence.
#[derive(Debug, Clone)]
pub struct GcaAdapter {
    pub cfg: GcaConfig,
    pub blocks: Vec<GcaBlock>,
}

impl GcaAdapter {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: GcaConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.num_blocks)
            .map(|i| GcaBlock::new(store, &format!("{prefix}.block{i}"), &cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, blocks })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, depth: &Tensor) -> Result<Var> {
        let mode = if self.cfg.use_axial {
            AttentionMode::Axial
        } else {
            AttentionMode::Full
        };
        self.forward_mode(g, store, x, depth, mode)
    }

    pub fn forward_mode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        depth: &Tensor,
        mode: AttentionMode,
    ) -> Result<Var> {
        self.blocks
            .iter()
            .try_fold(x, |h, b| b.forward(g, store, h, depth, &self.cfg, mode))
    }
}

/// Largest absolute difference between the axial and the full-image output
/// of `adapter` on `features: [C, H, W]`.
pub fn axial_vs_full_divergence(
    adapter: &GcaAdapter,
    store: &ParamStore,
    features: &Tensor,
    depth: &Tensor,
) -> Result<f64> {
    let run = |mode| -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let y = adapter.forward_mode(&mut g, store, x, depth, mode)?;
        Ok(g.value(y).clone())
    };
    let axial = run(AttentionMode::Axial)?;
    let full = run(AttentionMode::Full)?;
    Ok(axial.max_abs_diff(&full))
}
