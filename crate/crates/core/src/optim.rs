//! Small first-order optimizer shared by the calibration routines.

/// Adam with the AMSGrad running maximum on the second moment, which keeps
/// the effective step non-increasing once gradients shrink.
#[derive(Clone, Debug)]
pub(crate) struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    v_max: Vec<f64>,
    t: Vec<u32>,
}

impl Adam {
    pub(crate) fn new(n: usize, eps: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps, m: vec![0.0; n], v: vec![0.0; n], v_max: vec![0.0; n], t: vec![0; n] }
    }

    /// Updates the parameters in `range` using their gradients.
    pub(crate) fn step(&mut self, params: &mut [f64], grad: &[f64], range: std::ops::Range<usize>, lr: f64) {
        for i in range {
            self.t[i] += 1;
            let t = self.t[i] as i32;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            self.v_max[i] = self.v_max[i].max(self.v[i]);
            let m_hat = self.m[i] / (1.0 - self.beta1.powi(t));
            let v_hat = self.v_max[i] / (1.0 - self.beta2.powi(t));
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut x = vec![1.0, -2.0];
        let mut opt = Adam::new(2, 1e-8);
        for _ in 0..3000 {
            let g = vec![2.0 * x[0], 20.0 * x[1]];
            opt.step(&mut x, &g, 0..2, 0.01);
        }
        assert!(x[0].abs() < 1e-3 && x[1].abs() < 1e-3, "{x:?}");
    }

    #[test]
    fn untouched_range_is_frozen() {
        let mut x = vec![1.0, 1.0];
        let mut opt = Adam::new(2, 1e-8);
        opt.step(&mut x, &[1.0, 1.0], 1..2, 0.1);
        assert_eq!(x[0], 1.0);
        assert!(x[1] < 1.0);
    }
}
