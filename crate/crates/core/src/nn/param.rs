use super::Real;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A named array owned by a layer.
///
/// Trainable parameters carry a gradient accumulator and Adam moments. Non-trainable
/// entries (batch-norm running statistics) are checkpointed but never optimized.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
    /// Set when a backward pass wrote into `grad` since the last `zero_grad`.
    pub touched: bool,
    pub adam_m: Vec<T>,
    pub adam_v: Vec<T>,
    pub adam_steps: u64,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>, trainable: bool) -> Self {
        let len: usize = shape.iter().product();
        assert_eq!(len, value.len());
        let (grad, m, v) = if trainable {
            (vec![T::zero(); len], vec![T::zero(); len], vec![T::zero(); len])
        } else {
            (Vec::new(), Vec::new(), Vec::new())
        };
        Self {
            name: name.into(),
            shape,
            value,
            grad,
            trainable,
            touched: false,
            adam_m: m,
            adam_v: v,
            adam_steps: 0,
        }
    }

    pub fn constant(name: impl Into<String>, shape: Vec<usize>, v: f64, trainable: bool) -> Self {
        let len = shape.iter().product();
        Self::new(name, shape, vec![T::lit(v); len], trainable)
    }

    /// Zero-mean normal initialisation with the given standard deviation.
    pub fn normal<R: Rng>(name: impl Into<String>, shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite init std");
        let value = (0..len).map(|_| T::lit(dist.sample(rng))).collect();
        Self::new(name, shape, value, true)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
        self.touched = false;
    }

    pub fn grad_mut(&mut self) -> &mut [T] {
        self.touched = true;
        &mut self.grad
    }
}

/// Adam with per-parameter step counts; parameters that received no gradient in a step are
/// left completely untouched (value, moments and step count).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn update<T: Real>(&self, p: &mut Param<T>) {
        if !p.trainable || !p.touched {
            return;
        }
        p.adam_steps += 1;
        let t = p.adam_steps as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        let one = T::one();
        for i in 0..p.value.len() {
            let g = p.grad[i];
            p.adam_m[i] = b1 * p.adam_m[i] + (one - b1) * g;
            p.adam_v[i] = b2 * p.adam_v[i] + (one - b2) * g * g;
            let m_hat = p.adam_m[i] / c1;
            let v_hat = p.adam_v[i] / c2;
            p.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untouched_parameter_is_not_updated() {
        let mut p = Param::<f64>::constant("w", vec![2], 1.0, true);
        p.grad_mut()[0] = 1.0;
        Adam::default().update(&mut p);
        let snapshot = p.clone();
        p.zero_grad();
        Adam::default().update(&mut p);
        assert_eq!(p.value, snapshot.value);
        assert_eq!(p.adam_m, snapshot.adam_m);
        assert_eq!(p.adam_steps, 1);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut p = Param::<f64>::constant("w", vec![1], 0.0, true);
        p.grad_mut()[0] = 3.0;
        let adam = Adam { lr: 0.01, ..Adam::default() };
        adam.update(&mut p);
        assert!((p.value[0] + 0.01).abs() < 1e-9);
    }
}
