//! Named parameter storage with gradient accumulators and Adam moments.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

/// Deterministically ordered parameter store. Iteration order is the
/// lexicographic order of names, which keeps updates and checkpoints
/// reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) {
        assert!(
            !self.entries.contains_key(name),
            "parameter `{name}` registered twice"
        );
        let shape = value.shape.clone();
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                grad: Tensor::zeros(shape.clone()),
                m: Tensor::zeros(shape.clone()),
                v: Tensor::zeros(shape),
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.grad)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) {
        let e = self.entries.get_mut(name).expect("unknown parameter");
        assert_eq!(e.value.shape, value.shape, "parameter shape changed");
        e.value = value;
    }

    pub fn set_value_at(&mut self, name: &str, index: usize, v: f64) {
        self.entries.get_mut(name).expect("unknown parameter").value.data[index] = v;
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Add gradients from a backward pass; repeated calls accumulate.
    pub fn accumulate_grads(&mut self, grads: &BTreeMap<String, Tensor>) {
        for (name, g) in grads {
            let e = self.entries.get_mut(name).expect("gradient for unknown parameter");
            for (a, b) in e.grad.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn global_grad_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|e| e.grad.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients so the global L2 norm does not exceed `max_norm`.
    pub fn clip_gradients(&mut self, max_norm: f64) {
        let norm = self.global_grad_norm();
        if norm > max_norm {
            let s = max_norm / norm;
            for e in self.entries.values_mut() {
                e.grad.data.iter_mut().for_each(|v| *v *= s);
            }
        }
    }

    /// Standard Adam update with bias correction.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        for e in self.entries.values_mut() {
            for i in 0..e.value.len() {
                let g = e.grad.data[i];
                e.m.data[i] = beta1 * e.m.data[i] + (1.0 - beta1) * g;
                e.v.data[i] = beta2 * e.v.data[i] + (1.0 - beta2) * g * g;
                let mhat = e.m.data[i] / bc1;
                let vhat = e.v.data[i] / bc2;
                e.value.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.register(name, Tensor::scalar(v));
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = single("w", 1.5);
        s.adam_step(0.1, 0.9, 0.999, 1e-8);
        assert_eq!(s.get("w").unwrap().item(), 1.5);
    }

    #[test]
    fn adam_first_step_is_bias_corrected() {
        let mut s = single("w", 0.0);
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::scalar(1.0));
        s.accumulate_grads(&g);
        s.adam_step(0.1, 0.9, 0.999, 1e-8);
        // m_hat = v_hat = 1 after bias correction, so the step is -lr/(1+eps)
        let got = s.get("w").unwrap().item();
        assert!((got + 0.1).abs() < 1e-8, "got {got}");
    }

    #[test]
    fn adam_two_steps_match_reference_recurrence() {
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let grads = [0.7, -0.3];
        // independent recurrence
        let (mut m, mut v, mut w) = (0.0, 0.0, 2.0);
        for (k, &g) in grads.iter().enumerate() {
            let t = (k + 1) as f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1_pow(b1, t));
            let vh = v / (1.0 - b1_pow(b2, t));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        let mut s = single("w", 2.0);
        for &g in &grads {
            s.zero_grads();
            let mut gm = BTreeMap::new();
            gm.insert("w".to_string(), Tensor::scalar(g));
            s.accumulate_grads(&gm);
            s.adam_step(lr, b1, b2, eps);
        }
        assert!((s.get("w").unwrap().item() - w).abs() < 1e-14);

        fn b1_pow(b: f64, t: f64) -> f64 {
            b.powf(t)
        }
    }

    #[test]
    fn clipping_preserves_direction() {
        let mut s = ParamStore::new();
        s.register("w", Tensor::vector(vec![0.0, 0.0]));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::vector(vec![6.0, 8.0])); // norm 10
        s.accumulate_grads(&g);
        s.clip_gradients(5.0);
        let got = s.grad("w").unwrap();
        assert!((s.global_grad_norm() - 5.0).abs() < 1e-12);
        // direction preserved: cosine similarity 1
        let cos = (got.data[0] * 6.0 + got.data[1] * 8.0) / (5.0 * 10.0);
        assert!((cos - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clipping_below_threshold_is_identity() {
        let mut s = ParamStore::new();
        s.register("w", Tensor::vector(vec![3.0]));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::vector(vec![3.0]));
        s.accumulate_grads(&g);
        s.clip_gradients(5.0);
        assert_eq!(s.grad("w").unwrap().data[0], 3.0);
    }
}
