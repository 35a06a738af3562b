use autodiff::Tensor;

/// Learning rate after step decay by 0.1 at 3/8, 5/8 and 7/8 of `total`.
pub fn scheduled_lr(base: f64, iteration: usize, total: usize) -> f64 {
    let passed = [3, 5, 7].iter().filter(|&&k| iteration >= k * total / 8).count();
    base * 0.1f64.powi(passed as i32)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(shapes: &[Tensor]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: shapes.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *x -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// One plain gradient-descent step `p ← p − lr·g`.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, &gj) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= lr * gj;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_decays_at_three_milestones() {
        let lrs: Vec<f64> = [0, 2, 3, 4, 5, 6, 7].iter().map(|&i| scheduled_lr(1.0, i, 8)).collect();
        assert_eq!(lrs[0], 1.0);
        assert_eq!(lrs[1], 1.0);
        assert!((lrs[2] - 0.1).abs() < 1e-15);
        assert!((lrs[4] - 0.01).abs() < 1e-15);
        assert!((lrs[6] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0]).unwrap()];
        let g = vec![Tensor::vector(vec![0.5, -3.0]).unwrap()];
        let mut opt = Adam::new(&p);
        opt.step(&mut p, &g, 0.1);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] + 1.9).abs() < 1e-6);
    }
}
