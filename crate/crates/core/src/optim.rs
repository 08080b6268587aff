//! First/second-moment adaptive updates shared by every parameter group.

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-15;

/// Moment accumulators for a flat parameter vector; the step counter lives
/// with the owner so several groups can share one.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamMoments {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Updates the moments of entry `i` and returns the bias-corrected step
    /// to subtract from the parameter.
    #[inline]
    pub fn delta(&mut self, i: usize, grad: f64, lr: f64, step: u64) -> f64 {
        let m = BETA1 * self.m[i] + (1.0 - BETA1) * grad;
        let v = BETA2 * self.v[i] + (1.0 - BETA2) * grad * grad;
        self.m[i] = m;
        self.v[i] = v;
        let m_hat = m / (1.0 - BETA1.powi(step as i32));
        let v_hat = v / (1.0 - BETA2.powi(step as i32));
        lr * m_hat / (v_hat.sqrt() + EPSILON)
    }

    pub fn reset_range(&mut self, start: usize, len: usize) {
        self.m[start..start + len].fill(0.0);
        self.v[start..start + len].fill(0.0);
    }
}

/// Adam over one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    moments: AdamMoments,
    step: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            moments: AdamMoments::new(n),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.moments.len());
        self.step += 1;
        for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            *p -= self.moments.delta(i, g, lr, self.step);
        }
    }
}
