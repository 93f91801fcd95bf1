use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ParameterStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Adaptive-moment state with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Updates every parameter and zeroes all gradients.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<()> {
        self.step_filtered(store, |_| true)
    }

    /// Updates only parameters whose name passes `trainable`. Gradients of
    /// every parameter are zeroed afterwards.
    pub fn step_filtered(
        &mut self,
        store: &mut ParameterStore,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for p in store.iter() {
            if let Some(m) = self.moments.get(&p.name) {
                if m.first.len() != p.values.len() {
                    return Err(Error::OptimizerState {
                        name: p.name.clone(),
                        detail: format!(
                            "moment length {} vs parameter length {}",
                            m.first.len(),
                            p.values.len()
                        ),
                    });
                }
            }
        }

        self.step += 1;
        let AdamWConfig {
            learning_rate: lr,
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for p in store.iter_mut() {
            if trainable(&p.name) {
                let m = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                    first: vec![0.0; p.values.len()],
                    second: vec![0.0; p.values.len()],
                });
                for i in 0..p.values.len() {
                    let g = p.gradient[i];
                    p.values[i] *= 1.0 - lr * weight_decay;
                    m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * g;
                    m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * g * g;
                    let m_hat = m.first[i] / bc1;
                    let v_hat = m.second[i] / bc2;
                    p.values[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
            p.gradient.iter_mut().for_each(|g| *g = 0.0);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Parameter;

    fn scalar_store(v: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert(Parameter::new("p", vec![1], vec![v]).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut store = scalar_store(0.7);
        let mut opt = OptimizerState::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut store).unwrap();
        assert_eq!(store.by_name("p").unwrap().values, vec![0.7]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.0, -0.002] {
            let mut store = scalar_store(1.0);
            store.by_name_mut("p").unwrap().gradient[0] = g;
            let cfg = AdamWConfig {
                learning_rate: 1e-3,
                weight_decay: 0.0,
                ..Default::default()
            };
            let mut opt = OptimizerState::new(cfg);
            opt.step(&mut store).unwrap();
            let p = store.by_name("p").unwrap();
            let delta = p.values[0] - 1.0;
            // |m_hat / sqrt(v_hat)| = 1 exactly, up to epsilon
            let expected = -1e-3 * g.signum() * g.abs() / (g.abs() + 1e-8);
            assert!((delta - expected).abs() < 1e-15, "g={g}: {delta} vs {expected}");
            assert_eq!(p.gradient, vec![0.0]);
        }
    }

    #[test]
    fn decay_multiplies_parameter() {
        let mut store = scalar_store(2.0);
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        OptimizerState::new(cfg).step(&mut store).unwrap();
        assert!((store.by_name("p").unwrap().values[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn filtered_step_leaves_frozen_parameters() {
        let mut store = scalar_store(1.0);
        store.insert(Parameter::new("q", vec![1], vec![1.0]).unwrap()).unwrap();
        store.by_name_mut("p").unwrap().gradient[0] = 1.0;
        store.by_name_mut("q").unwrap().gradient[0] = 1.0;
        let mut opt = OptimizerState::new(AdamWConfig::default());
        opt.step_filtered(&mut store, |n| n == "p").unwrap();
        assert_ne!(store.by_name("p").unwrap().values[0], 1.0);
        assert_eq!(store.by_name("q").unwrap().values[0], 1.0);
        assert_eq!(store.by_name("q").unwrap().gradient[0], 0.0);
    }

    #[test]
    fn shape_drift_is_reported() {
        let mut store = scalar_store(1.0);
        let mut opt = OptimizerState::new(AdamWConfig::default());
        opt.step(&mut store).unwrap();

        let mut other = ParameterStore::new();
        other.insert(Parameter::new("p", vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(matches!(
            opt.step(&mut other),
            Err(Error::OptimizerState { .. })
        ));
    }
}
