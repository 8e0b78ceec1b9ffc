use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// A set of parameters sharing one learning-rate multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<ParamId>,
    pub lr_scale: f32,
    /// Decay is applied to a tensor only when both this flag and the tensor's
    /// own flag in the store are set (biases, norms and embeddings opt out).
    pub weight_decay_enabled: bool,
}

impl ParamGroup {
    /// Every parameter of `store` in one group with scale 1.
    pub fn all(store: &ParamStore) -> Vec<ParamGroup> {
        vec![ParamGroup {
            name: "all".into(),
            params: store.ids().collect(),
            lr_scale: 1.0,
            weight_decay_enabled: true,
        }]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamWState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        AdamWState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update of every grouped parameter. `lr` is the already
/// scheduled base rate; each group multiplies it by its `lr_scale`.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[Tensor],
    groups: &[ParamGroup],
    state: &mut AdamWState,
    lr: f32,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::shape(
            "adamw",
            format!("{} params, {} grads, {} moments", store.len(), grads.len(), state.m.len()),
        ));
    }
    for group in groups {
        if group.lr_scale <= 0.0 {
            return Err(Error::config("lr_scale", format!("group {} has non-positive scale", group.name)));
        }
        for &id in &group.params {
            let p = store.get(id);
            if grads[id.index()].shape() != p.shape() || state.m[id.index()].shape() != p.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!(
                        "{}: param {:?}, grad {:?}",
                        store.names()[id.index()],
                        p.shape(),
                        grads[id.index()].shape()
                    ),
                ));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);
    for group in groups {
        let glr = lr * group.lr_scale;
        for &id in &group.params {
            let decay = if group.weight_decay_enabled && store.decays(id) {
                1.0 - glr * cfg.weight_decay
            } else {
                1.0
            };
            let i = id.index();
            let g = grads[i].data();
            let m = state.m[i].data_mut();
            let v = state.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let m_hat = m[k] as f64 / bc1;
                let v_hat = v[k] as f64 / bc2;
                let update = (glr as f64 * m_hat / (v_hat.sqrt() + cfg.eps as f64)) as f32;
                p[k] = p[k] * decay - update;
            }
        }
    }
    Ok(())
}

/// Cosine annealing from `base_lr` at step 0 to `min_lr` at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f32, min_lr: f32) -> Result<f32> {
    if total_steps == 0 {
        return Err(Error::config("total_steps", "must be positive"));
    }
    let s = step.min(total_steps) as f64;
    let cos = (std::f64::consts::PI * s / total_steps as f64).cos();
    Ok((min_lr as f64 + (base_lr as f64 - min_lr as f64) * (1.0 + cos) / 2.0) as f32)
}
