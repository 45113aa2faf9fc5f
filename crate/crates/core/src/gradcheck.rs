//! Central finite-difference verification of reverse-mode gradients.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Upper bound on checked elements per tensor; `None` checks all.
    pub max_elements: Option<usize>,
    /// Negates every analytic gradient before comparison. Used to prove the
    /// checker catches a broken backward pass.
    pub flip_sign: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_elements: None,
            flip_sign: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_err))
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// `|a - n| / (|a| + |n| + 1e-10)`. The floor sits below central-difference
/// roundoff, so gradients that vanish identically (a bias shifting every
/// logit of a softmax) compare as equal rather than as noise over noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-10)
}

fn sample_indices(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => (0..m).map(|i| i * len / m).collect(),
        _ => (0..len).collect(),
    }
}

/// Compares the analytic gradient of the scalar `f` with central differences,
/// over every named input tensor and every parameter of `store`.
pub fn gradcheck<F>(f: F, inputs: &[(&str, Tensor)], store: &ParamStore, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&cfg.step) {
        return Err(config_err(format!("gradcheck step {} outside [1e-7, 1e-3]", cfg.step)));
    }
    let eval = |store: &ParamStore, tensors: &[Tensor], what: &str| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, store, &vars).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{m} while perturbing {what}")),
            other => other,
        })?;
        let v = g.value(loss);
        if v.len() != 1 {
            return Err(Error::Dimension {
                op: "gradcheck",
                lhs: v.shape().to_vec(),
                rhs: alloc::vec![1],
            });
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss while perturbing {what}")));
        }
        Ok(v)
    };

    let tensors: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = tensors.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, store, &vars)?;
    let grads = g.backward(loss)?;
    let mut with_grads = store.clone();
    with_grads.zero_grad();
    grads.accumulate_into(&mut with_grads);
    let sign = if cfg.flip_sign { -1.0 } else { 1.0 };
    let h = cfg.step;

    let mut report = GradCheckReport::default();
    for (slot, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[slot]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        if !analytic.all_finite() {
            return Err(Error::NonFinite(format!("analytic gradient of {name}")));
        }
        let mut worst = 0.0f64;
        let idx = sample_indices(t.len(), cfg.max_elements);
        for &i in &idx {
            let mut probe = tensors.clone();
            let base = probe[slot].data()[i];
            probe[slot].data_mut()[i] = base + h;
            let up = eval(store, &probe, name)?;
            probe[slot].data_mut()[i] = base - h;
            let down = eval(store, &probe, name)?;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(sign * analytic.data()[i], numeric));
        }
        report.entries.push(GradCheckEntry {
            name: name.to_string(),
            max_rel_err: worst,
            checked: idx.len(),
        });
    }
    for (id, p) in with_grads.iter() {
        if !p.grad.all_finite() {
            return Err(Error::NonFinite(format!("analytic gradient of {}", p.name)));
        }
        let mut worst = 0.0f64;
        let idx = sample_indices(p.value.len(), cfg.max_elements);
        let mut probe = store.clone();
        for &i in &idx {
            let base = p.value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = base + h;
            let up = eval(&probe, &tensors, &p.name)?;
            probe.get_mut(id).value.data_mut()[i] = base - h;
            let down = eval(&probe, &tensors, &p.name)?;
            probe.get_mut(id).value.data_mut()[i] = base;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(sign * p.grad.data()[i], numeric));
        }
        report.entries.push(GradCheckEntry {
            name: p.name.clone(),
            max_rel_err: worst,
            checked: idx.len(),
        });
    }
    Ok(report)
}

/// Reduces `v` to a scalar through a fixed pseudo-random weighting, so that
/// every output element contributes a distinct, non-cancelling gradient.
pub fn probe_loss(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(g.shape(v), |_| {
        let mag = rng.random_range(0.5..1.5);
        if rng.random::<bool>() {
            mag
        } else {
            -mag
        }
    });
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    g.sum(p)
}

/// A tensor of uniform values in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}
