use std::sync::Arc;

use super::*;

/// Execution strategy for model code. Models are written once against this
/// trait and run either eagerly (inference, finite-difference oracles) or on a
/// [`Graph`] (training, gradient computation).
pub trait Backend<F: Float> {
    type V: Clone;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<F>;
    fn param(&mut self, name: &str, t: &Arc<Tensor<F>>) -> Self::V;
    fn constant(&mut self, t: Tensor<F>) -> Self::V;
    fn matmul_ex(&mut self, a: &Self::V, ta: bool, b: &Self::V, tb: bool) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: &Self::V, s: F) -> Self::V;
    fn relu(&mut self, a: &Self::V) -> Self::V;
    fn sigmoid(&mut self, a: &Self::V) -> Self::V;
    fn tanh(&mut self, a: &Self::V) -> Self::V;
    fn softmax(&mut self, a: &Self::V, axis: usize) -> Result<Self::V>;
    fn layer_norm(&mut self, x: &Self::V, gain: &Self::V, bias: &Self::V) -> Result<Self::V>;
    fn embedding(&mut self, table: &Self::V, ids: &[usize]) -> Result<Self::V>;
    fn concat(&mut self, parts: &[Self::V], axis: usize) -> Result<Self::V>;
    fn slice(&mut self, a: &Self::V, axis: usize, start: usize, end: usize) -> Result<Self::V>;
    fn dropout(&mut self, a: &Self::V, p: f64) -> Self::V;
    fn cross_entropy(&mut self, logits: &Self::V, targets: &[usize], eps: f64, ignore: Option<usize>) -> Result<Self::V>;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.matmul_ex(a, false, b, false)
    }

    fn shape(&self, v: &Self::V) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }
}

/// Direct evaluation without recording anything. Dropout is the identity.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

type Shared<F> = Arc<Tensor<F>>;

impl<F: Float> Backend<F> for Eager {
    type V = Shared<F>;

    fn value<'a>(&'a self, v: &'a Shared<F>) -> &'a Tensor<F> {
        v
    }

    fn param(&mut self, _name: &str, t: &Shared<F>) -> Shared<F> {
        Arc::clone(t)
    }

    fn constant(&mut self, t: Tensor<F>) -> Shared<F> {
        Arc::new(t)
    }

    fn matmul_ex(&mut self, a: &Shared<F>, ta: bool, b: &Shared<F>, tb: bool) -> Result<Shared<F>> {
        matmul_ex(a, ta, b, tb).map(Arc::new)
    }

    fn add(&mut self, a: &Shared<F>, b: &Shared<F>) -> Result<Shared<F>> {
        add(a, b).map(Arc::new)
    }

    fn mul(&mut self, a: &Shared<F>, b: &Shared<F>) -> Result<Shared<F>> {
        mul(a, b).map(Arc::new)
    }

    fn scale(&mut self, a: &Shared<F>, s: F) -> Shared<F> {
        Arc::new(scale(a, s))
    }

    fn relu(&mut self, a: &Shared<F>) -> Shared<F> {
        Arc::new(relu(a))
    }

    fn sigmoid(&mut self, a: &Shared<F>) -> Shared<F> {
        Arc::new(sigmoid(a))
    }

    fn tanh(&mut self, a: &Shared<F>) -> Shared<F> {
        Arc::new(tanh(a))
    }

    fn softmax(&mut self, a: &Shared<F>, axis: usize) -> Result<Shared<F>> {
        softmax(a, axis).map(Arc::new)
    }

    fn layer_norm(&mut self, x: &Shared<F>, gain: &Shared<F>, bias: &Shared<F>) -> Result<Shared<F>> {
        layer_norm(x, gain, bias, LAYER_NORM_EPS).map(Arc::new)
    }

    fn embedding(&mut self, table: &Shared<F>, ids: &[usize]) -> Result<Shared<F>> {
        embedding(table, ids).map(Arc::new)
    }

    fn concat(&mut self, parts: &[Shared<F>], axis: usize) -> Result<Shared<F>> {
        let refs: Vec<&Tensor<F>> = parts.iter().map(|p| p.as_ref()).collect();
        concat(&refs, axis).map(Arc::new)
    }

    fn slice(&mut self, a: &Shared<F>, axis: usize, start: usize, end: usize) -> Result<Shared<F>> {
        slice(a, axis, start, end).map(Arc::new)
    }

    fn dropout(&mut self, a: &Shared<F>, _p: f64) -> Shared<F> {
        Arc::clone(a)
    }

    fn cross_entropy(&mut self, logits: &Shared<F>, targets: &[usize], eps: f64, ignore: Option<usize>) -> Result<Shared<F>> {
        smoothed_cross_entropy(logits, targets, eps, ignore).map(|(l, _, _)| Arc::new(Tensor::scalar(l)))
    }
}

impl<F: Float> Backend<F> for Graph<F> {
    type V = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<F> {
        Graph::value(self, *v)
    }

    fn param(&mut self, name: &str, t: &Shared<F>) -> Var {
        Graph::param(self, name, t)
    }

    fn constant(&mut self, t: Tensor<F>) -> Var {
        Graph::constant(self, t)
    }

    fn matmul_ex(&mut self, a: &Var, ta: bool, b: &Var, tb: bool) -> Result<Var> {
        Graph::matmul_ex(self, *a, ta, *b, tb)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Graph::add(self, *a, *b)
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Graph::mul(self, *a, *b)
    }

    fn scale(&mut self, a: &Var, s: F) -> Var {
        Graph::scale(self, *a, s)
    }

    fn relu(&mut self, a: &Var) -> Var {
        Graph::relu(self, *a)
    }

    fn sigmoid(&mut self, a: &Var) -> Var {
        Graph::sigmoid(self, *a)
    }

    fn tanh(&mut self, a: &Var) -> Var {
        Graph::tanh(self, *a)
    }

    fn softmax(&mut self, a: &Var, axis: usize) -> Result<Var> {
        Graph::softmax(self, *a, axis)
    }

    fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var) -> Result<Var> {
        Graph::layer_norm(self, *x, *gain, *bias)
    }

    fn embedding(&mut self, table: &Var, ids: &[usize]) -> Result<Var> {
        Graph::embedding(self, *table, ids)
    }

    fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        Graph::concat(self, parts, axis)
    }

    fn slice(&mut self, a: &Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        Graph::slice(self, *a, axis, start, end)
    }

    fn dropout(&mut self, a: &Var, p: f64) -> Var {
        Graph::dropout(self, *a, p)
    }

    fn cross_entropy(&mut self, logits: &Var, targets: &[usize], eps: f64, ignore: Option<usize>) -> Result<Var> {
        Graph::cross_entropy(self, *logits, targets, eps, ignore)
    }
}
