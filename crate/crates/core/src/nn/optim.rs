use super::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam {
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
    Sgd {
        learning_rate: f64,
    },
}

impl OptimizerKind {
    pub fn adam() -> OptimizerKind {
        OptimizerKind::Adam {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn sgd(learning_rate: f64) -> OptimizerKind {
        OptimizerKind::Sgd { learning_rate }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerKind::Adam { learning_rate, .. } | OptimizerKind::Sgd { learning_rate } => {
                learning_rate
            }
        }
    }

    pub fn with_learning_rate(self, lr: f64) -> OptimizerKind {
        match self {
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
                ..
            } => OptimizerKind::Adam {
                learning_rate: lr,
                beta1,
                beta2,
                epsilon,
            },
            OptimizerKind::Sgd { .. } => OptimizerKind::Sgd { learning_rate: lr },
        }
    }
}

/// Optimizer state: the step count and, for Adam, first and second moment
/// estimates shaped like the parameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Result<Optimizer> {
        let lr = kind.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if let OptimizerKind::Adam {
            beta1,
            beta2,
            epsilon,
            ..
        } = kind
        {
            if !(0.0..1.0).contains(&beta1)
                || !(0.0..1.0).contains(&beta2)
                || epsilon.is_nan()
                || epsilon <= 0.0
            {
                return Err(Error::InvalidParameter(
                    "adam needs beta in [0, 1) and epsilon > 0".into(),
                ));
            }
        }
        Ok(Optimizer {
            kind,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite
    /// or shapes disagree.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidParameter(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    layer: i,
                    reason: format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(i));
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd { learning_rate } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= learning_rate * gv;
                    }
                }
            }
            OptimizerKind::Adam {
                learning_rate,
                beta1,
                beta2,
                epsilon,
            } => {
                if self.first.is_empty() {
                    self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.second = self.first.clone();
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((pv, &gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mv = flush(beta1 * *mv + (1.0 - beta1) * gv);
                        *vv = flush(beta2 * *vv + (1.0 - beta2) * gv * gv);
                        let m_hat = *mv / c1;
                        let v_hat = *vv / c2;
                        *pv -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Moments of parameters whose gradient stays zero (dead ReLU units) decay
/// geometrically into the subnormal range, where arithmetic is many times
/// slower. Below the smallest normal value they are set to zero; the update
/// they would produce is far below one ulp of any normal parameter.
fn flush(x: f64) -> f64 {
    if x.abs() < f64::MIN_POSITIVE {
        0.0
    } else {
        x
    }
}
