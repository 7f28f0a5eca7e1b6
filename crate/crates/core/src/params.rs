//! Named trainable parameters with additive gradient accumulators and Adam
//! moments. The store is read-shared during forward/backward across images;
//! accumulation and optimizer steps are exclusive.

use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

#[derive(Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    pub adam_step_count: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {:?}",
            name
        );
        let n = value.numel();
        self.params.push(Parameter {
            name,
            value,
            grad: vec![0.0; n],
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub(crate) fn param_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(
            self.params[id.0].value.shape(),
            value.shape(),
            "parameter {} shape is immutable",
            self.params[id.0].name
        );
        self.params[id.0].value = value;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Add `scale * grad` into the accumulator of `id`.
    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor, scale: f64) {
        let p = &mut self.params[id.0];
        assert_eq!(p.value.shape(), grad.shape(), "gradient shape mismatch for {}", p.name);
        for (g, &d) in p.grad.iter_mut().zip(grad.data()) {
            *g += scale * d;
        }
    }

    /// One Adam update from the current accumulators (which are then cleared).
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) {
        self.adam_step_count += 1;
        let t = self.adam_step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for p in &mut self.params {
            let mut next = p.value.data().to_vec();
            for i in 0..next.len() {
                let g = p.grad[i];
                p.adam_m[i] = beta1 * p.adam_m[i] + (1.0 - beta1) * g;
                p.adam_v[i] = beta2 * p.adam_v[i] + (1.0 - beta2) * g * g;
                let m_hat = p.adam_m[i] / bc1;
                let v_hat = p.adam_v[i] / bc2;
                next[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.value = Tensor::new(p.value.shape().to_vec(), next);
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Glorot-uniform weight matrix [rows, cols] with explicit fan counts.
    pub fn glorot(rng: &mut Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform_in(-a, a)).collect())
    }
}

/// Leaf vars for every parameter in the store, indexed by `ParamId.0`.
pub fn bind_params(tape: &mut Tape, store: &ParamStore) -> Vec<Var> {
    store.iter().map(|(id, p)| tape.param_leaf(id.0, p.value.clone())).collect()
}

impl Tape {
    /// Accumulate d(root)/d(parameter) into every bound parameter's gradient
    /// accumulator, additively.
    pub fn backward(&mut self, root: Var, store: &mut ParamStore) {
        for (key, grad) in self.param_gradients(root) {
            store.accumulate(ParamId(key), &grad, 1.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_accumulates_additively() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![2.0, 3.0]));

        let mut tape = Tape::new();
        let vars = bind_params(&mut tape, &store);
        let sq = tape.mul(vars[w.0], vars[w.0]);
        let root = tape.sum_all(sq);

        tape.backward(root, &mut store);
        assert_eq!(store.get(w).grad, vec![4.0, 6.0]);
        // second backward doubles exactly
        tape.backward(root, &mut store);
        assert_eq!(store.get(w).grad, vec![8.0, 12.0]);
        store.zero_grads();
        assert_eq!(store.get(w).grad, vec![0.0, 0.0]);
    }

    #[test]
    fn unreached_parameter_gets_zero_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(1.0));
        let b = store.add("b", Tensor::scalar(5.0));

        let mut tape = Tape::new();
        let vars = bind_params(&mut tape, &store);
        let root = tape.mul(vars[a.0], vars[a.0]);
        tape.backward(root, &mut store);
        assert_eq!(store.get(a).grad, vec![2.0]);
        assert_eq!(store.get(b).grad, vec![0.0]);
    }

    #[test]
    fn adam_step_moves_against_gradient_and_clears() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(1.0));
        store.accumulate(w, &Tensor::scalar(10.0), 1.0);
        store.adam_step(0.001, 0.9, 0.999, 1e-8);
        let v = store.value(w).item();
        assert!(v < 1.0 && v > 1.0 - 0.0011, "first step is ~lr in magnitude, got {}", v);
        assert_eq!(store.get(w).grad, vec![0.0]);
    }

    #[test]
    fn glorot_variance_matches_fan_counts() {
        let mut rng = Rng::seeded(5, 0);
        let (fan_in, fan_out) = (300, 200);
        let t = ParamStore::glorot(&mut rng, vec![fan_out, fan_in], fan_in, fan_out);
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expect = 2.0 / (fan_in + fan_out) as f64;
        assert!((var - expect).abs() / expect < 0.2, "variance {} vs {}", var, expect);
    }
}
