//! AdamW with decoupled weight decay, global-norm clipping, and a cosine
//! learning-rate schedule.

use ndarray::Array2;

use crate::error::{Error, Result};

use super::params::ModelParams;

/// Cosine schedule hitting both endpoints exactly: `cosine_lr(0, t, ..)` is
/// `lr_max` and `cosine_lr(t, t, ..)` is `lr_min`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr_max;
    }
    let frac = (step.min(total_steps) as f64) / total_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone)]
pub struct OptimConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    /// Denominator of the cosine schedule; the optimizer uses its internal
    /// step counter as the numerator, so the final step of a
    /// `total_steps + 1`-step run lands exactly on `lr_min`.
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_max: 1e-3,
            lr_min: 1e-6,
            total_steps: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

/// Serializable optimizer moments, stored alongside parameters in
/// checkpoints so training resumes bit-exactly.
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

pub struct AdamW {
    cfg: OptimConfig,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(params: &ModelParams, cfg: OptimConfig) -> Self {
        let m = params
            .entries()
            .iter()
            .map(|e| Array2::zeros((e.value.nrows(), e.value.ncols())))
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamW { cfg, step: 0, m, v }
    }

    pub fn state(&self) -> AdamState {
        AdamState { step: self.step, m: self.m.clone(), v: self.v.clone() }
    }

    pub fn restore(&mut self, state: AdamState, params: &ModelParams) -> Result<()> {
        if state.m.len() != params.len() || state.v.len() != params.len() {
            return Err(Error::config(format!(
                "optimizer state holds {} tensors but the model has {}",
                state.m.len(),
                params.len()
            )));
        }
        self.step = state.step;
        self.m = state.m;
        self.v = state.v;
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. `grads` must align with `params` by
    /// position. Returns the learning rate that was used.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Array2<f64>]) -> Result<f64> {
        if grads.len() != params.len() {
            return Err(Error::config(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            let p = &params.entry(i).value;
            if (g.nrows(), g.ncols()) != (p.nrows(), p.ncols()) {
                return Err(Error::config(format!(
                    "gradient shape {}x{} for parameter {} of shape {}x{}",
                    g.nrows(),
                    g.ncols(),
                    params.entry(i).name,
                    p.nrows(),
                    p.ncols()
                )));
            }
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::numerical(format!(
                    "non-finite gradient ({bad}) for parameter {}",
                    params.entry(i).name
                )));
            }
        }

        let sq_sum: f64 = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum();
        let norm = sq_sum.sqrt();
        let scale = match self.cfg.clip_norm {
            Some(clip) if norm > clip => clip / norm,
            _ => 1.0,
        };

        let lr = cosine_lr(self.step, self.cfg.total_steps, self.cfg.lr_max, self.cfg.lr_min);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);

        for i in 0..params.len() {
            let decay = params.entry(i).decay;
            let value = params.value_mut(i);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((pv, (mv, vv)), gv) in value
                .iter_mut()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .zip(grads[i].iter())
            {
                let g = gv * scale;
                *mv = self.cfg.beta1 * *mv + (1.0 - self.cfg.beta1) * g;
                *vv = self.cfg.beta2 * *vv + (1.0 - self.cfg.beta2) * g * g;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
                if decay {
                    *pv -= lr * self.cfg.weight_decay * *pv;
                }
            }
        }
        Ok(lr)
    }
}
