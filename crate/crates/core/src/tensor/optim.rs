use super::{Result, Tensor, TensorError};

/// Cosine-annealed learning rate:
/// `lr_min + (lr_initial - lr_min) * (1 + cos(pi * step / total_steps)) / 2`.
pub fn cosine_annealing_lr(step: usize, total_steps: usize, lr_initial: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(TensorError::Invalid("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(TensorError::Invalid(format!(
            "step {step} beyond schedule length {total_steps}"
        )));
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_initial - lr_min) * (1.0 + phase.cos()))
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Adam with bias correction. One instance drives any number of parameter
/// tensors that share a step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(shapes: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            states: shapes.iter().map(|&n| AdamState::zeros(n)).collect(),
        }
    }

    pub fn with_defaults(shapes: &[usize]) -> Self {
        Self::new(shapes, 0.9, 0.999, 1e-8)
    }

    pub fn states(&self) -> &[AdamState] {
        &self.states
    }

    /// Applies one update to every parameter in place.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != self.states.len() {
            return Err(TensorError::Shape(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.states.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), s) in params.iter().zip(grads).zip(&self.states) {
            if p.len() != s.m.len() || g.len() != s.m.len() {
                return Err(TensorError::Shape("adam parameter/gradient length mismatch".into()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.states) {
            adam_update(p, g, s, lr, self.beta1, self.beta2, self.eps, bc1, bc2);
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update(p: &mut [f64], g: &[f64], s: &mut AdamState, lr: f64, b1: f64, b2: f64, eps: f64, bc1: f64, bc2: f64) {
    for i in 0..p.len() {
        let gi = g[i];
        s.m[i] = b1 * s.m[i] + (1.0 - b1) * gi;
        s.v[i] = b2 * s.v[i] + (1.0 - b2) * gi * gi;
        let m_hat = s.m[i] / bc1;
        let v_hat = s.v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Single-tensor convenience wrapper around [`Adam`].
pub fn adam_step(
    params: &Tensor,
    grads: &Tensor,
    state: &mut AdamState,
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<Tensor> {
    params.expect_same_shape(grads)?;
    if state.m.len() != params.numel() {
        return Err(TensorError::Shape("adam state length mismatch".into()));
    }
    let t = step as i32;
    let mut p = params.data().to_vec();
    adam_update(
        &mut p,
        grads.data(),
        state,
        lr,
        beta1,
        beta2,
        eps,
        1.0 - beta1.powi(t),
        1.0 - beta2.powi(t),
    );
    Tensor::new(params.shape(), p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_annealing_lr(0, 100, 0.03, 0.0).unwrap(), 0.03);
        assert!((cosine_annealing_lr(100, 100, 0.03, 0.001).unwrap() - 0.001).abs() < 1e-15);
        assert!((cosine_annealing_lr(50, 100, 0.03, 0.0).unwrap() - 0.015).abs() < 1e-15);
        assert!(cosine_annealing_lr(0, 0, 0.03, 0.0).is_err());
        assert!(cosine_annealing_lr(101, 100, 0.03, 0.0).is_err());
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::zeros(&[3]);
        let mut s = AdamState {
            m: vec![0.1, 0.2, 0.3],
            v: vec![0.01, 0.02, 0.03],
        };
        let out = adam_step(&p, &g, &mut s, 3, 0.03, 0.9, 0.999, 1e-8).unwrap();
        // moments decay, and the update uses the decayed first moment
        assert!((s.m[0] - 0.09).abs() < 1e-15);
        assert!((s.v[0] - 0.00999).abs() < 1e-15);
        let mut q = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut s0 = AdamState::zeros(3);
        q = adam_step(&q, &g, &mut s0, 1, 0.03, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(q, p);
        assert_ne!(out, p);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        let p = Tensor::new(&[2], vec![0.0, 1.0]).unwrap();
        let g = Tensor::new(&[2], vec![0.5, -2.0]).unwrap();
        let mut s = AdamState::zeros(2);
        let out = adam_step(&p, &g, &mut s, 1, 0.03, 0.9, 0.999, 1e-8).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let expect0 = 0.0 - 0.03 * 0.5 / (0.5 + 1e-8);
        let expect1 = 1.0 - 0.03 * -2.0 / (2.0 + 1e-8);
        assert!((out.data()[0] - expect0).abs() < 1e-15);
        assert!((out.data()[1] - expect1).abs() < 1e-15);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut adam = Adam::with_defaults(&[4]);
            let mut p = vec![0.1, 0.2, 0.3, 0.4];
            for k in 0..10 {
                let g: Vec<f64> = p.iter().map(|v| v * v - 0.01 * k as f64).collect();
                adam.step(&mut [&mut p], &[&g], 0.03).unwrap();
            }
            p
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut adam = Adam::with_defaults(&[2]);
        let mut p = vec![0.0; 3];
        assert!(adam.step(&mut [&mut p], &[&[0.0; 3]], 0.1).is_err());
    }
}
