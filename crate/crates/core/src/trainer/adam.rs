use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Apply one update. Parameters without a gradient see a zero gradient.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::ParameterMismatch("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = grads[i].as_ref().map(Tensor::data);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| f64::from(g[j]));
                let mj = self.beta1 * f64::from(m[j]) + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * f64::from(v[j]) + (1.0 - self.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let upd = lr * (mj / c1) / ((vj / c2).sqrt() + self.eps);
                *w = (f64::from(*w) - upd) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap()];
        let mut opt = Adam::new(&p);
        for _ in 0..2000 {
            let g = Tensor::from_vec(&[2], p[0].data().iter().map(|x| 2.0 * x).collect()).unwrap();
            opt.update(&mut p, &[Some(g)], 0.01).unwrap();
        }
        assert!(p[0].data().iter().all(|x| x.abs() < 1e-2), "{:?}", p[0].data());
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::from_vec(&[1], vec![1.0]).unwrap()];
        let mut opt = Adam::new(&p);
        opt.update(&mut p, &[Some(Tensor::from_vec(&[1], vec![0.3]).unwrap())], 0.1).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
    }
}
