//! Adamax and Adam parameter updates.

use serde::{Deserialize, Serialize};

use super::{Elem, LayerGraph, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptAlgorithm {
    /// Adam variant that normalises updates by the running absolute maximum
    /// of the gradients instead of the second moment.
    Adamax,
    Adam,
}

/// Optimisation schedule and hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub algorithm: OptAlgorithm,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
}

impl Default for OptimizerConfig {
    /// Adamax with the optimizer's standard moments. The full-scale schedule
    /// is 1500 epochs x 50 steps; desk-scale runs override `epochs`.
    fn default() -> Self {
        OptimizerConfig {
            algorithm: OptAlgorithm::Adamax,
            learning_rate: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 1500,
            steps_per_epoch: 50,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(crate::Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(crate::Error::invalid("moment coefficients must be in [0, 1)"));
        }
        Ok(())
    }
}

const OPT_EPS: f64 = 1e-8;

/// Per-parameter optimiser state (first moment and second moment / max).
pub struct OptState<F> {
    m: Vec<ndarray::ArrayD<F>>,
    u: Vec<ndarray::ArrayD<F>>,
    t: u64,
}

impl<F: Elem> OptState<F> {
    pub fn new(graph: &LayerGraph) -> OptState<F> {
        let zeros = Params::<F>::zeros_like(graph);
        OptState {
            m: zeros.tensors.clone(),
            u: zeros.tensors,
            t: 0,
        }
    }

    /// Applies one update step in place.
    pub fn step(&mut self, cfg: &OptimizerConfig, params: &mut Params<F>, grads: &Params<F>) {
        self.t += 1;
        let b1 = F::from_f64(cfg.beta1);
        let b2 = F::from_f64(cfg.beta2);
        let one_m_b1 = F::one() - b1;
        let one_m_b2 = F::one() - b2;
        let bias1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let eps = F::from_f64(OPT_EPS);
        match cfg.algorithm {
            OptAlgorithm::Adamax => {
                let lr = F::from_f64(cfg.learning_rate / bias1);
                for ((p, g), (m, u)) in params
                    .tensors
                    .iter_mut()
                    .zip(grads.tensors.iter())
                    .zip(self.m.iter_mut().zip(self.u.iter_mut()))
                {
                    ndarray::Zip::from(p)
                        .and(g)
                        .and(m)
                        .and(u)
                        .for_each(|p, &g, m, u| {
                            *m = b1 * *m + one_m_b1 * g;
                            *u = (b2 * *u).max(g.abs());
                            *p = *p - lr * *m / (*u + eps);
                        });
                }
            }
            OptAlgorithm::Adam => {
                let bias2 = 1.0 - cfg.beta2.powi(self.t as i32);
                let lr = F::from_f64(cfg.learning_rate * bias2.sqrt() / bias1);
                for ((p, g), (m, u)) in params
                    .tensors
                    .iter_mut()
                    .zip(grads.tensors.iter())
                    .zip(self.m.iter_mut().zip(self.u.iter_mut()))
                {
                    ndarray::Zip::from(p)
                        .and(g)
                        .and(m)
                        .and(u)
                        .for_each(|p, &g, m, u| {
                            *m = b1 * *m + one_m_b1 * g;
                            *u = b2 * *u + one_m_b2 * g * g;
                            *p = *p - lr * *m / (u.sqrt() + eps);
                        });
                }
            }
        }
    }
}
