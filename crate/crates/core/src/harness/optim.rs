use crate::error::Result;
use crate::tensor::{Gradients, ParamStore, Real, Tensor};

/// `lr₀·(1 − step/total)^power`, reaching zero at `total`.
pub fn poly_lr(lr0: f64, step: usize, total: usize, power: f64) -> f64 {
    let frac = (step.min(total) as f64) / total.max(1) as f64;
    lr0 * (1.0 - frac).powf(power)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let corr1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::from_f64(lr), T::from_f64(self.eps));
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = grads.get(id).data();
            let mut m = self.m[i].to_vec();
            let mut v = self.v[i].to_vec();
            let mut p = store.value(id).to_vec();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + c1 * g[j];
                v[j] = b2 * v[j] + c2 * g[j] * g[j];
                let mh = m[j] / corr1;
                let vh = v[j] / corr2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
            let shape = store.value(id).shape().to_vec();
            self.m[i] = Tensor::from_vec(&shape, m)?;
            self.v[i] = Tensor::from_vec(&shape, v)?;
            store.set_value(id, Tensor::from_vec(&shape, p)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(poly_lr(1.0, 0, 100, 0.9), 1.0);
        assert!((poly_lr(1.0, 50, 100, 0.9) - 0.5f64.powf(0.9)).abs() < 1e-15);
        assert_eq!(poly_lr(1.0, 100, 100, 0.9), 0.0);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap()).unwrap();
        let tape = Tape::new();
        let w = tape.param(&store, id);
        let loss = w.mul(w).unwrap().sum();
        let grads = tape.backward(loss, &store).unwrap();
        let mut adam = Adam::new(&store, 0.9, 0.999, 1e-12);
        adam.step(&mut store, &grads, 0.1).unwrap();
        let v = store.value(id).to_vec();
        assert!((v[0] - 0.9).abs() < 1e-9 && (v[1] + 0.9).abs() < 1e-9, "{v:?}");
    }
}
