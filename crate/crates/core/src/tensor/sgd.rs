use super::{Tensor, TensorError};

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
/// `v <- momentum * v + (g + weight_decay * p)`, `p <- p - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<(), TensorError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(TensorError::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        if params.len() != grads.len() {
            return Err(TensorError::ShapeMismatch {
                op: "sgd_step",
                detail: format!("{} parameters, {} gradients", params.len(), grads.len()),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "sgd_step",
                    detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
            if !g.all_finite() {
                return Err(TensorError::NonFinite { op: "sgd_step" });
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        } else if self.velocity.len() != params.len()
            || self.velocity.iter().zip(&params).any(|(v, p)| v.len() != p.numel())
        {
            return Err(TensorError::ShapeMismatch {
                op: "sgd_step",
                detail: "optimizer state does not match parameters".into(),
            });
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + (gv + self.weight_decay * *pv);
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}
