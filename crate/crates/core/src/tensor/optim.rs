use super::{ParamStore, Result, Scalar, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update over every parameter in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(TensorError::MissingGradient(p.name.clone()));
        }
        while self.first.len() < store.len() {
            let (_, p) = store.iter().nth(self.first.len()).expect("in range");
            let n = p.value.len();
            self.first.push(vec![T::zero(); n]);
            self.second.push(vec![T::zero(); n]);
        }
        self.step += 1;
        let c = self.config;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let one = T::one();
        let correction1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let correction2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::of(c.lr);
        let eps = T::of(c.eps);
        for (k, p) in store.iter_mut().enumerate() {
            let grad = p.grad.as_ref().expect("checked above");
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let m_hat = m[j] / correction1;
                let v_hat = v[j] / correction2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Clamps every gradient component into `[lo, hi]`; returns how many were clamped.
pub fn clip_gradients<T: Scalar>(store: &mut ParamStore<T>, lo: f64, hi: f64) -> usize {
    let (lo, hi) = (T::of(lo), T::of(hi));
    let mut clamped = 0;
    for p in store.iter_mut() {
        if let Some(g) = &mut p.grad {
            for v in g.iter_mut() {
                if *v < lo {
                    *v = lo;
                    clamped += 1;
                } else if *v > hi {
                    *v = hi;
                    clamped += 1;
                }
            }
        }
    }
    clamped
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    #[test]
    fn clip_examples() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_zeros("w", &[3]).unwrap();
        store.accumulate_grad(id, &[-7.0, 0.0, 9.0]);
        assert_eq!(clip_gradients(&mut store, -5.0, 5.0), 2);
        assert_eq!(store.get(id).grad.as_deref().unwrap(), &[-5.0, 0.0, 5.0]);

        store.zero_grad();
        store.accumulate_grad(id, &[1.0, -4.5, 5.0]);
        assert_eq!(clip_gradients(&mut store, -5.0, 5.0), 0);
        assert_eq!(store.get(id).grad.as_deref().unwrap(), &[1.0, -4.5, 5.0]);
    }

    #[test]
    fn clip_count_matches_out_of_range_entries() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add_zeros("w", &[8]).unwrap();
        let g = [-12.0, 5.0, 5.5, -5.0, 0.1, 100.0, -5.01, 3.0];
        store.accumulate_grad(id, &g);
        let expected = g.iter().filter(|v| v.abs() > 5.0).count();
        assert_eq!(clip_gradients(&mut store, -5.0, 5.0), expected);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_zeros("w", &[1]).unwrap();
        store.accumulate_grad(id, &[1.0]);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut store).unwrap();
        let w = store.value(id).data()[0];
        assert!((w + 2e-4).abs() < 1e-9, "{w}");
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64(&[2], &[0.3, -1.0]).unwrap()).unwrap();
        store.zero_grad();
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut store).unwrap();
        assert_eq!(store.value(id).data(), &[0.3, -1.0]);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut store = ParamStore::<f32>::new();
        store.add_zeros("encoder.weight", &[2]).unwrap();
        let mut adam = AdamState::new(AdamConfig::default());
        let err = adam.step(&mut store).unwrap_err();
        assert_eq!(err, TensorError::MissingGradient("encoder.weight".into()));
    }

    #[test]
    fn quadratic_loss_decreases_over_two_steps() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap()).unwrap();
        let mut adam = AdamState::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        let loss = |store: &mut ParamStore<f64>| {
            let mut g = Graph::new();
            let w = g.param(store, id);
            let sq = g.mul(w, w).unwrap();
            let l = g.sum_all(sq);
            g.backward(l);
            store.zero_grad();
            g.accumulate_param_grads(store);
            g.value(l).data()[0]
        };
        let l0 = loss(&mut store);
        adam.step(&mut store).unwrap();
        let l1 = loss(&mut store);
        adam.step(&mut store).unwrap();
        let l2 = loss(&mut store);
        assert!(l1 < l0 && l2 < l1, "{l0} {l1} {l2}");
    }
}
