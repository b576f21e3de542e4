use crate::autodiff::Tensor;
use crate::error::{dim_err, Result};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    /// Zeroed moments matching `params`; β = (0.9, 0.999), ε = 1e-8.
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = |p: &[Tensor]| p.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    /// One update. `decay[i]` selects which arrays get weight decay; a
    /// missing gradient is treated as zero.
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Option<&Tensor>],
        lr: f64,
        weight_decay: f64,
        decay: &dyn Fn(usize) -> bool,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return dim_err("optimizer state does not match parameter list");
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let wd = if decay(i) { weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = grads[i];
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return dim_err(format!(
                        "gradient {:?} for parameter {:?}",
                        g.shape(),
                        p.shape()
                    ));
                }
            }
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *x -= lr * wd * *x;
                *x -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_and_decay_leave_params() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let before = p.clone();
        let mut opt = AdamW::new(&p);
        let g = Tensor::zeros(&[2]);
        opt.step(&mut p, &[Some(&g)], 0.1, 0.0, &|_| true).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_is_normalized_gradient() {
        let mut p = vec![Tensor::vector(vec![0.5, 0.5, 0.5])];
        let g = Tensor::vector(vec![3.0, -0.01, 1e-3]);
        let mut opt = AdamW::new(&p);
        let lr = 0.01;
        opt.step(&mut p, &[Some(&g)], lr, 0.0, &|_| false).unwrap();
        for (x, gv) in p[0].data().iter().zip(g.data()) {
            let expect = 0.5 - lr * gv / (gv.abs() + 1e-8);
            assert!((x - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn decay_is_decoupled_from_moments() {
        let mut p = vec![Tensor::vector(vec![2.0])];
        let g = Tensor::vector(vec![0.5]);
        let mut opt = AdamW::new(&p);
        let (lr, wd) = (0.1, 0.3);
        opt.step(&mut p, &[Some(&g)], lr, wd, &|_| true).unwrap();
        // Moments only ever see the gradient.
        assert!((opt.m[0].data()[0] - 0.05).abs() < 1e-15);
        assert!((opt.v[0].data()[0] - 0.00025).abs() < 1e-15);
        let shrunk = 2.0 - lr * wd * 2.0;
        let expect = shrunk - lr * 0.5 / (0.5 + 1e-8);
        assert!((p[0].data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn decay_mask_is_respected() {
        let mut p = vec![Tensor::vector(vec![1.0]), Tensor::vector(vec![1.0])];
        let mut opt = AdamW::new(&p);
        opt.step(&mut p, &[None, None], 0.1, 0.5, &|i| i == 0)
            .unwrap();
        assert!((p[0].data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(p[1].data()[0], 1.0);
    }
}
