use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::Scalar;

/// Handle to one tensor inside a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat store of named rank-2 tensors. Vectors are stored as `1 x n` rows.
/// A gradient buffer is a store with the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    names: Vec<String>,
    tensors: Vec<Array2<T>>,
    trainable: Vec<bool>,
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), trainable: Vec::new() }
    }
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Array2<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        self.trainable.push(trainable);
        ParamId(self.tensors.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)), true)
    }

    pub fn ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::ones((rows, cols)), true)
    }

    pub fn normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let t = Array2::from_shape_simple_fn((rows, cols), || T::of(dist.sample(rng)));
        self.add(name, t, true)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Array2::len).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
            trainable: self.trainable.clone(),
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.fill(T::zero());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Euclidean norm over trainable tensors.
    pub fn norm(&self) -> f64 {
        self.ids()
            .filter(|&id| self.is_trainable(id))
            .map(|id| self.get(id).iter().map(|v| v.as_f64().powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: T) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * k);
        }
    }

    /// Precision conversion with identical layout.
    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.mapv(|v| U::of(v.as_f64()))).collect(),
            trainable: self.trainable.clone(),
        }
    }
}

/// Decoupled-weight-decay Adam. State is sized lazily on the first step.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u32,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// Updates every trainable tensor of `params` from the matching tensor of `grads`.
    pub fn update(&mut self, params: &mut Params<T>, grads: &Params<T>) {
        if self.m.is_empty() {
            self.m = grads.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (lr, wd, eps) = (T::of(self.lr), T::of(self.weight_decay), T::of(self.eps));
        let (b1t, b2t, c1t, c2t) = (T::of(b1), T::of(b2), T::of(c1), T::of(c2));
        for i in 0..params.tensors.len() {
            if !params.trainable[i] {
                continue;
            }
            Zip::from(&mut params.tensors[i])
                .and(&grads.tensors[i])
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .for_each(|p, &g, m, v| {
                    *m = b1t * *m + (T::one() - b1t) * g;
                    *v = b2t * *v + (T::one() - b2t) * g * g;
                    let mhat = *m / c1t;
                    let vhat = *v / c2t;
                    *p = *p - lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn store_layout_and_cast() {
        let mut p = Params::<f64>::new();
        let a = p.add("a", array![[1.0, 2.0]], true);
        let b = p.zeros("b", 2, 3);
        assert_eq!(p.numel(), 8);
        assert_eq!(p.find("b"), Some(b));
        assert_eq!(p.name(a), "a");
        let g = p.zeros_like();
        assert!(g.get(a).iter().all(|&v| v == 0.0));
        let q: Params<f32> = p.cast();
        assert_eq!(q.get(a), &array![[1.0f32, 2.0]]);
    }

    #[test]
    fn adamw_zero_lr_is_identity_and_minimizes_quadratic() {
        let mut p = Params::<f64>::new();
        let x = p.add("x", array![[3.0, -2.0]], true);
        let before = p.clone();
        let mut g = p.zeros_like();
        g.get_mut(x).fill(1.0);
        AdamW::new(0.0, 0.01).update(&mut p, &g);
        assert_eq!(p, before);
        let mut opt = AdamW::new(0.05, 0.0);
        for _ in 0..2000 {
            let grad = p.get(x).mapv(|v| 2.0 * v);
            *g.get_mut(x) = grad;
            opt.update(&mut p, &g);
        }
        assert!(p.get(x).iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn frozen_tensors_do_not_move() {
        let mut p = Params::<f32>::new();
        let x = p.add("x", array![[1.0]], false);
        let mut g = p.zeros_like();
        g.get_mut(x).fill(5.0);
        AdamW::new(0.1, 0.1).update(&mut p, &g);
        assert_eq!(p.get(x)[[0, 0]], 1.0);
    }
}
