use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

/// Handle to one trainable tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// One trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

/// Flat store of all trainable parameters of a model.
///
/// Gradients accumulate across backward passes until [`ParamSet::sgd_step`]
/// or [`ParamSet::zero_grads`] clears them.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, tensor: Tensor) -> ParamId {
        let n = tensor.len();
        let id = ParamId(self.params.len());
        self.params.push(Param {
            shape: tensor.shape().to_vec(),
            values: tensor.values().to_vec(),
            grad: vec![0.0; n],
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value_tensor(&self, id: ParamId) -> Tensor {
        let p = &self.params[id.0];
        Tensor::new(p.shape.clone(), p.values.clone()).expect("stored param is consistent")
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        debug_assert_eq!(p.grad.len(), grad.len());
        for (g, d) in p.grad.iter_mut().zip(grad) {
            *g += d;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Vanilla SGD with decoupled-from-loss L2 weight decay:
    /// `p <- p - lr * (grad + 2 * weight_decay * p)`, then grads are zeroed.
    pub fn sgd_step(&mut self, lr: f64, weight_decay: f64) {
        for p in &mut self.params {
            for (v, g) in p.values.iter_mut().zip(p.grad.iter_mut()) {
                *v -= lr * (*g + 2.0 * weight_decay * *v);
                *g = 0.0;
            }
        }
    }

    /// True when every stored value and gradient is finite.
    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.values.iter().chain(p.grad.iter()).all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_moves_against_gradient() {
        let mut ps = ParamSet::new();
        let id = ps.register(Tensor::new(vec![1], vec![1.0]).unwrap());
        ps.accumulate_grad(id, &[1.0]);
        ps.sgd_step(0.1, 0.0);
        assert_eq!(ps.get(id).values[0], 0.9);
        assert_eq!(ps.get(id).grad[0], 0.0);
    }

    #[test]
    fn sgd_decay_only() {
        // p=1, grad=0, lr=0.1, wd=0.5 -> 1 - 0.1 * (2 * 0.5 * 1) = 0.9
        let mut ps = ParamSet::new();
        let id = ps.register(Tensor::new(vec![1], vec![1.0]).unwrap());
        ps.sgd_step(0.1, 0.5);
        assert_eq!(ps.get(id).values[0], 0.9);
    }

    #[test]
    fn sgd_fixed_point_without_grad_or_decay() {
        let mut ps = ParamSet::new();
        let id = ps.register(Tensor::new(vec![2], vec![0.25, -3.5]).unwrap());
        ps.sgd_step(0.1, 0.0);
        assert_eq!(ps.get(id).values, vec![0.25, -3.5]);
    }

    #[test]
    fn sgd_on_empty_set_is_noop() {
        let mut ps = ParamSet::new();
        ps.sgd_step(0.1, 0.1);
        assert!(ps.is_empty());
    }

    #[test]
    fn grads_accumulate_until_cleared() {
        let mut ps = ParamSet::new();
        let id = ps.register(Tensor::new(vec![1], vec![0.0]).unwrap());
        ps.accumulate_grad(id, &[1.5]);
        ps.accumulate_grad(id, &[1.5]);
        assert_eq!(ps.get(id).grad[0], 3.0);
        ps.zero_grads();
        assert_eq!(ps.get(id).grad[0], 0.0);
    }
}
