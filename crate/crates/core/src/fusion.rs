//! Gated fusion of the lifted volume `F_lss` and the refined volume `F_vt`.

use alloc::format;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::Rng;

use crate::error::{config_err, dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv3d, Linear};
use crate::param::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionStrategy {
    Aaf,
    Ca3d,
    None,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 3] = [Self::Aaf, Self::Ca3d, Self::None];

    pub fn name(self) -> &'static str {
        match self {
            Self::Aaf => "aaf",
            Self::Ca3d => "ca3d",
            Self::None => "none",
        }
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| config_err(format!("unknown fusion strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    /// Volume axes (of `[C, X, Y, Z]`) averaged away by this unit.
    pub fn pooled_axes(self) -> [usize; 2] {
        match self {
            Axis::X => [2, 3],
            Axis::Y => [1, 3],
            Axis::Z => [1, 2],
        }
    }

    fn volume_axis(self) -> usize {
        match self {
            Axis::X => 1,
            Axis::Y => 2,
            Axis::Z => 3,
        }
    }
}

/// `σ ⊙ a + (1 − σ) ⊙ b`.
pub fn gate_combine(g: &mut Graph, sigma: Var, a: Var, b: Var) -> Result<Var> {
    let diff = g.sub(a, b)?;
    let scaled = g.mul(sigma, diff)?;
    g.add(b, scaled)
}

fn check_pair(g: &Graph, lss: Var, vt: Var, channels: usize) -> Result<()> {
    let (a, b) = (g.shape(lss), g.shape(vt));
    if a != b || a.len() != 4 || a[0] != channels {
        return Err(dim_err("fusion", a, b));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub channels: usize,
    /// Concatenate instead of summing the two volumes for the gate input.
    pub concat_joint: bool,
}

impl FusionConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            concat_joint: false,
        }
    }

    fn joint_channels(&self) -> usize {
        if self.concat_joint {
            2 * self.channels
        } else {
            self.channels
        }
    }
}

fn joint(g: &mut Graph, cfg: &FusionConfig, lss: Var, vt: Var) -> Result<Var> {
    if cfg.concat_joint {
        g.concat(&[lss, vt], 0)
    } else {
        g.add(lss, vt)
    }
}

/// Per-channel MLP applied to a `[C, ...]` descriptor with `n` positions.
#[derive(Debug, Clone)]
struct ChannelMlp {
    fc1: Linear,
    fc2: Linear,
}

impl ChannelMlp {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), c_in, c_out, rng),
            fc2: Linear::new(store, &format!("{prefix}.fc2"), c_out, c_out, rng),
        }
    }

    /// `desc: [C_in, n]` to `[C_out, n]`.
    fn forward(&self, g: &mut Graph, store: &ParamStore, desc: Var) -> Result<Var> {
        let rows = g.permute(desc, &[1, 0])?;
        let h = self.fc1.forward(g, store, rows)?;
        let h = g.relu(h)?;
        let y = self.fc2.forward(g, store, h)?;
        g.permute(y, &[1, 0])
    }
}

/// One axis-specific gating unit.
#[derive(Debug, Clone)]
pub struct AafUnit {
    pub axis: Axis,
    local1: Conv3d,
    local2: Conv3d,
    global: ChannelMlp,
}

impl AafUnit {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, axis: Axis, cfg: &FusionConfig, rng: &mut R) -> Self {
        let (cj, c) = (cfg.joint_channels(), cfg.channels);
        let hidden = (c / 2).max(1);
        Self {
            axis,
            local1: Conv3d::new(store, &format!("{prefix}.local1"), cj, hidden, 3, rng),
            local2: Conv3d::new(store, &format!("{prefix}.local2"), hidden, c, 1, rng),
            global: ChannelMlp::new(store, &format!("{prefix}.global"), cj, c, rng),
        }
    }

    /// Global pathway before broadcasting: `[C, X, 1, 1]`, `[C, 1, Y, 1]` or
    /// `[C, 1, 1, Z]`.
    pub fn global_term(&self, g: &mut Graph, store: &ParamStore, joint: Var) -> Result<Var> {
        let s = g.shape(joint).to_vec();
        let pooled = g.mean(joint, &self.axis.pooled_axes())?;
        let keep = s[self.axis.volume_axis()];
        let desc = g.reshape(pooled, &[s[0], keep])?;
        let y = self.global.forward(g, store, desc)?;
        let c = g.shape(y)[0];
        let mut shape = [c, 1, 1, 1];
        shape[self.axis.volume_axis()] = keep;
        g.reshape(y, &shape)
    }

    pub fn gate(&self, g: &mut Graph, store: &ParamStore, joint: Var) -> Result<Var> {
        let local = self.local1.forward(g, store, joint)?;
        let local = g.relu(local)?;
        let local = self.local2.forward(g, store, local)?;
        let global = self.global_term(g, store, joint)?;
        let logits = g.add(local, global)?;
        g.sigmoid(logits)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, joint: Var, lss: Var, vt: Var) -> Result<Var> {
        let sigma = self.gate(g, store, joint)?;
        gate_combine(g, sigma, lss, vt)
    }

    /// Makes the gate a constant `sigmoid(logit)` everywhere.
    pub fn force_gate(&self, store: &mut ParamStore, logit: f64) {
        self.local2.zero(store);
        store.get_mut(self.local2.b).value.data_mut().fill(logit);
        self.global.fc2.zero(store);
    }
}

/// Sum of three axis-specific gated combinations.
#[derive(Debug, Clone)]
pub struct AafFusion {
    pub cfg: FusionConfig,
    pub units: Vec<AafUnit>,
}

impl AafFusion {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: FusionConfig, rng: &mut R) -> Result<Self> {
        if cfg.channels == 0 {
            return Err(config_err("fusion needs at least one channel"));
        }
        let units = Axis::ALL
            .into_iter()
            .map(|a| AafUnit::new(store, &format!("{prefix}.{a:?}").to_lowercase(), a, &cfg, rng))
            .collect();
        Ok(Self { cfg, units })
    }

    pub fn force_gates(&self, store: &mut ParamStore, logit: f64) {
        for u in &self.units {
            u.force_gate(store, logit);
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, lss: Var, vt: Var) -> Result<Var> {
        check_pair(g, lss, vt, self.cfg.channels)?;
        let joint = joint(g, &self.cfg, lss, vt)?;
        let mut total: Option<Var> = None;
        for u in &self.units {
            let y = u.forward(g, store, joint, lss, vt)?;
            total = Some(match total {
                Some(t) => g.add(t, y)?,
                None => y,
            });
        }
        Ok(total.expect("three units"))
    }
}

/// Single isotropic channel-attention gate.
#[derive(Debug, Clone)]
pub struct ChannelAttention3d {
    pub cfg: FusionConfig,
    mlp: ChannelMlp,
}

impl ChannelAttention3d {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: FusionConfig, rng: &mut R) -> Result<Self> {
        if cfg.channels == 0 {
            return Err(config_err("fusion needs at least one channel"));
        }
        let mlp = ChannelMlp::new(store, &format!("{prefix}.mlp"), cfg.joint_channels(), cfg.channels, rng);
        Ok(Self { cfg, mlp })
    }

    pub fn force_gate(&self, store: &mut ParamStore, logit: f64) {
        self.mlp.fc2.zero(store);
        store.get_mut(self.mlp.fc2.b).value.data_mut().fill(logit);
    }

    /// Per-channel gate `[C, 1, 1, 1]`.
    pub fn gate(&self, g: &mut Graph, store: &ParamStore, joint: Var) -> Result<Var> {
        let cj = g.shape(joint)[0];
        let pooled = g.mean(joint, &[1, 2, 3])?;
        let desc = g.reshape(pooled, &[cj, 1])?;
        let y = self.mlp.forward(g, store, desc)?;
        let y = g.sigmoid(y)?;
        g.reshape(y, &[self.cfg.channels, 1, 1, 1])
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, lss: Var, vt: Var) -> Result<Var> {
        check_pair(g, lss, vt, self.cfg.channels)?;
        let joint = joint(g, &self.cfg, lss, vt)?;
        let sigma = self.gate(g, store, joint)?;
        gate_combine(g, sigma, lss, vt)
    }
}

/// Any of the fusion strategies behind one interface.
#[derive(Debug, Clone)]
pub enum Fusion {
    Aaf(AafFusion),
    Ca3d(ChannelAttention3d),
    Passthrough,
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        strategy: FusionStrategy,
        cfg: FusionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match strategy {
            FusionStrategy::Aaf => Self::Aaf(AafFusion::new(store, prefix, cfg, rng)?),
            FusionStrategy::Ca3d => Self::Ca3d(ChannelAttention3d::new(store, prefix, cfg, rng)?),
            FusionStrategy::None => Self::Passthrough,
        })
    }

    pub fn strategy(&self) -> FusionStrategy {
        match self {
            Self::Aaf(_) => FusionStrategy::Aaf,
            Self::Ca3d(_) => FusionStrategy::Ca3d,
            Self::Passthrough => FusionStrategy::None,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, lss: Var, vt: Var) -> Result<Var> {
        match self {
            Self::Aaf(m) => m.forward(g, store, lss, vt),
            Self::Ca3d(m) => m.forward(g, store, lss, vt),
            Self::Passthrough => {
                if g.shape(lss) != g.shape(vt) {
                    return Err(dim_err("fusion", g.shape(lss), g.shape(vt)));
                }
                Ok(vt)
            }
        }
    }
}
