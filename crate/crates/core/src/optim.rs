//! Client optimizers operating on flat parameter vectors.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sgd,
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub method: Method,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            method: Method::Adamw,
            learning_rate: 1e-3,
            batch_size: 4,
            local_steps: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerSpec {
    pub fn sgd(learning_rate: f64, batch_size: usize, local_steps: usize) -> Self {
        Self {
            method: Method::Sgd,
            learning_rate,
            batch_size,
            local_steps,
            ..Self::default()
        }
    }

    /// Returns the name of the offending field and the violated constraint.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(("learning_rate", format!("must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(("batch_size", "must be >= 1".into()));
        }
        if self.local_steps == 0 {
            return Err(("local_steps", "must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(("beta1", format!("must be in [0, 1), got {}", self.beta1)));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(("beta2", format!("must be in [0, 1), got {}", self.beta2)));
        }
        if !(self.eps > 0.0) {
            return Err(("eps", format!("must be > 0, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(("weight_decay", format!("must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Optimizer state for one parameter vector. Fresh per client per round.
#[derive(Clone, Debug)]
pub struct Optimizer {
    spec: OptimizerSpec,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(spec: &OptimizerSpec, len: usize) -> Self {
        let moments = if spec.method == Method::Adamw { len } else { 0 };
        Self {
            spec: spec.clone(),
            m: vec![0.0; moments],
            v: vec![0.0; moments],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
        let lr = self.spec.learning_rate;
        match self.spec.method {
            Method::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            Method::Adamw => {
                self.t += 1;
                let (b1, b2) = (self.spec.beta1, self.spec.beta2);
                let c1 = 1.0 - b1.powi(self.t);
                let c2 = 1.0 - b2.powi(self.t);
                let decay = lr * self.spec.weight_decay;
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= decay * *p + lr * m_hat / (v_hat.sqrt() + self.spec.eps);
                }
            }
        }
    }
}
