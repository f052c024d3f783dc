//! Adam optimizer over a [`ParamStore`].

use super::store::{BlockId, ParamStore};
use super::DiffError;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state with bias correction and optional per-block learning rates.
///
/// Parameters whose gradient and both moments are exactly zero are skipped;
/// this matches the dense update bitwise (the dense update would compute
/// `p -= lr * 0 / (0 + eps)`), so sparse gather gradients stay cheap without
/// changing results.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    block_lr: Vec<Option<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: vec![0.0; store.len()],
            v: vec![0.0; store.len()],
            t: 0,
            block_lr: vec![None; store.block_ids().count()],
        }
    }

    /// Overrides the learning rate for one block (e.g. a noise-amplitude grid
    /// trained faster than the field).
    pub fn set_block_lr(&mut self, block: BlockId, lr: f64) {
        self.block_lr[block.0 as usize] = Some(lr);
    }

    /// Updates the global learning rate; block overrides are unaffected.
    /// Moment estimates carry over, so this implements lr schedules.
    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients accumulated in `store`, then
    /// zeroes them. Fails without zeroing if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), DiffError> {
        assert_eq!(self.m.len(), store.len(), "optimizer/store size mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);

        let plan: Vec<(std::ops::Range<usize>, f64)> = store
            .block_ids()
            .map(|(id, _)| {
                let lr = self.block_lr[id.0 as usize].unwrap_or(self.cfg.lr);
                (store.block_range(id), lr)
            })
            .collect();

        let mut bad: Option<usize> = None;
        'outer: for (range, lr) in plan {
            let (values, grads) = store.update_split();
            for i in range {
                let g = grads[i];
                if g == 0.0 && self.m[i] == 0.0 && self.v[i] == 0.0 {
                    continue;
                }
                if !g.is_finite() {
                    bad = Some(i);
                    break 'outer;
                }
                self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        if let Some(i) = bad {
            return Err(DiffError::NonFiniteGrad {
                block: store.block_of_index(i).to_string(),
            });
        }
        store.zero_grads();
        Ok(())
    }
}
