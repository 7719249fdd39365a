use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var, kind: Broadcast },
    Mul { a: Var, b: Var, kind: Broadcast },
    Scale { a: Var, s: F },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, normalized: Tensor<F>, inv_std: Vec<F> },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Transpose(Var),
    Sum(Var),
    Dropout { a: Var, mask: Tensor<F> },
    CrossEntropy { logits: Var, targets: Vec<usize>, eps: f64, ignore: Option<usize>, probs: Tensor<F>, count: usize },
}

struct Node<F> {
    value: Arc<Tensor<F>>,
    op: Op<F>,
}

/// Reverse-mode computation graph. Nodes are appended in execution order, so
/// the node list is already topologically sorted.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: HashMap<String, Var>,
    rng: ChaCha8Rng,
    training: bool,
}

/// Gradients of a scalar loss with respect to every node that influenced it.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn reduce_to<F: Float>(grad: Tensor<F>, kind: Broadcast, target_shape: &[usize]) -> Tensor<F> {
    match kind {
        Broadcast::Same => grad,
        Broadcast::Scalar => {
            let s: F = grad.data().iter().copied().sum();
            Tensor::full(target_shape, s)
        }
        Broadcast::Rows => {
            let c = grad.cols();
            let mut out = vec![F::zero(); c];
            for r in 0..grad.rows() {
                for (o, &g) in out.iter_mut().zip(grad.row(r)) {
                    *o += g;
                }
            }
            Tensor::new(target_shape.to_vec(), out).expect("row-broadcast shape")
        }
    }
}

fn accumulate<F: Float>(slot: &mut Option<Tensor<F>>, g: Tensor<F>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<F: Float> Graph<F> {
    /// A graph in training mode (dropout active) with the given dropout seed.
    pub fn new(seed: u64) -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), rng: ChaCha8Rng::seed_from_u64(seed), training: true }
    }

    /// A graph with dropout disabled; used for gradient checks.
    pub fn inference() -> Self {
        let mut g = Self::new(0);
        g.training = false;
        g
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op });
        Var(self.nodes.len() - 1)
    }

    /// Register a named parameter leaf. Repeated registrations of the same
    /// name return the same node so gradients accumulate in one place.
    pub fn param(&mut self, name: &str, value: &Arc<Tensor<F>>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        self.nodes.push(Node { value: Arc::clone(value), op: Op::Leaf });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn matmul_ex(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let out = matmul_ex(self.value(a), ta, self.value(b), tb)?;
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = broadcast_kind("add", self.value(a).shape(), self.value(b).shape())?;
        let out = add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add { a, b, kind }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = broadcast_kind("mul", self.value(a).shape(), self.value(b).shape())?;
        let out = mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul { a, b, kind }))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = scale(self.value(a), s);
        self.push(out, Op::Scale { a, s })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = relu(self.value(a));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = sigmoid(self.value(a));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = tanh(self.value(a));
        self.push(out, Op::Tanh(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = softmax(self.value(a), axis)?;
        Ok(self.push(out, Op::Softmax { a, axis }))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, stats) = layer_norm_with_stats(self.value(x), self.value(gain), self.value(bias), LAYER_NORM_EPS)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, normalized: stats.normalized, inv_std: stats.inv_std }))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = embedding(self.value(table), ids)?;
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = concat(&values, axis)?;
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let out = slice(self.value(a), axis, start, end)?;
        Ok(self.push(out, Op::Slice { a, axis, start }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = transpose(self.value(a))?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = sum(self.value(a));
        self.push(out, Op::Sum(a))
    }

    /// Inverted dropout; identity when `p == 0` or the graph is not training.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return a;
        }
        let shape = self.value(a).shape().to_vec();
        let mask = dropout_mask(&shape, p, &mut self.rng);
        let out = mul(self.value(a), &mask).expect("mask has operand shape");
        self.push(out, Op::Dropout { a, mask })
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], eps: f64, ignore: Option<usize>) -> Result<Var> {
        let (loss, probs, count) = smoothed_cross_entropy(self.value(logits), targets, eps, ignore)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), eps, ignore, probs, count },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), F::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b, ta, tb } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = if *ta { matmul_ex(bv, *tb, &g, true)? } else { matmul_ex(&g, false, bv, !*tb)? };
                    let gb = if *tb { matmul_ex(&g, true, av, *ta)? } else { matmul_ex(av, !*ta, &g, false)? };
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add { a, b, kind } => {
                    let gb = reduce_to(g.clone(), *kind, self.value(*b).shape());
                    accumulate(&mut grads[a.0], g);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Mul { a, b, kind } => {
                    let ga = mul(&g, self.value(*b))?;
                    let gb_full = mul(&g, self.value(*a))?;
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], reduce_to(gb_full, *kind, self.value(*b).shape()));
                }
                Op::Scale { a, s } => accumulate(&mut grads[a.0], scale(&g, *s)),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let d = g.data().iter().zip(x.data()).map(|(&g, &x)| if x > F::zero() { g } else { F::zero() });
                    accumulate(&mut grads[a.0], Tensor::new(x.shape().to_vec(), d.collect())?);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let d = g.data().iter().zip(y.data()).map(|(&g, &y)| g * y * (F::one() - y));
                    accumulate(&mut grads[a.0], Tensor::new(y.shape().to_vec(), d.collect())?);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let d = g.data().iter().zip(y.data()).map(|(&g, &y)| g * (F::one() - y * y));
                    accumulate(&mut grads[a.0], Tensor::new(y.shape().to_vec(), d.collect())?);
                }
                Op::Softmax { a, axis } => {
                    let y = &node.value;
                    let shape = y.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let len = shape[*axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let mut d = Tensor::zeros(shape);
                    for o in 0..outer {
                        for k in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + k;
                            let dot: F = (0..len).map(|j| g.data()[idx(j)] * y.data()[idx(j)]).sum();
                            for j in 0..len {
                                d.data_mut()[idx(j)] = y.data()[idx(j)] * (g.data()[idx(j)] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::LayerNorm { x, gain, bias, normalized, inv_std } => {
                    let c = normalized.cols();
                    let gv = self.value(*gain);
                    let mut dgain = vec![F::zero(); c];
                    let mut dbias = vec![F::zero(); c];
                    let mut dx = Tensor::zeros(normalized.shape());
                    let n = F::of(c as f64);
                    for r in 0..normalized.rows() {
                        let gr = g.row(r);
                        let nr = normalized.row(r);
                        let dn: Vec<F> = (0..c).map(|j| gr[j] * gv.data()[j]).collect();
                        for j in 0..c {
                            dgain[j] += gr[j] * nr[j];
                            dbias[j] += gr[j];
                        }
                        let mean_dn = dn.iter().copied().sum::<F>() / n;
                        let mean_dn_n = dn.iter().zip(nr).map(|(&a, &b)| a * b).sum::<F>() / n;
                        let out = dx.row_mut(r);
                        for j in 0..c {
                            out[j] = inv_std[r] * (dn[j] - mean_dn - nr[j] * mean_dn_n);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut grads[gain.0], Tensor::new(gv.shape().to_vec(), dgain)?);
                    let bshape = self.value(*bias).shape().to_vec();
                    accumulate(&mut grads[bias.0], Tensor::new(bshape, dbias)?);
                }
                Op::Embedding { table, ids } => {
                    let tv = self.value(*table);
                    let mut d = Tensor::zeros(tv.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &v) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[table.0], d);
                }
                Op::Concat { parts, axis } => {
                    let mut start = 0;
                    for p in parts {
                        let len = self.value(*p).shape()[*axis];
                        accumulate(&mut grads[p.0], slice(&g, *axis, start, start + len)?);
                        start += len;
                    }
                }
                Op::Slice { a, axis, start } => {
                    let src_shape = self.value(*a).shape().to_vec();
                    let outer: usize = src_shape[..*axis].iter().product();
                    let len = src_shape[*axis];
                    let inner: usize = src_shape[axis + 1..].iter().product();
                    let taken = g.shape()[*axis];
                    let mut d = Tensor::zeros(&src_shape);
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        let src = o * taken * inner;
                        d.data_mut()[dst..dst + taken * inner].copy_from_slice(&g.data()[src..src + taken * inner]);
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::Transpose(a) => accumulate(&mut grads[a.0], transpose(&g)?),
                Op::Sum(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads[a.0], Tensor::full(&shape, g.item()));
                }
                Op::Dropout { a, mask } => accumulate(&mut grads[a.0], mul(&g, mask)?),
                Op::CrossEntropy { logits, targets, eps, ignore, probs, count } => {
                    let vocab = probs.cols();
                    let mut d = Tensor::zeros(probs.shape());
                    if *count > 0 {
                        let coef = g.item() / F::of(*count as f64);
                        let eps_f = F::of(*eps);
                        let uniform = eps_f / F::of(vocab as f64);
                        for (r, &t) in targets.iter().enumerate() {
                            if Some(t) == *ignore {
                                continue;
                            }
                            let pr = probs.row(r);
                            let out = d.row_mut(r);
                            for j in 0..vocab {
                                out[j] = coef * (pr[j] - uniform);
                            }
                            out[t] -= coef * (F::one() - eps_f);
                        }
                    }
                    accumulate(&mut grads[logits.0], d);
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every registered parameter, zero-filled when a parameter
    /// did not influence the loss.
    pub fn param_grads(&self, grads: &Gradients<F>) -> BTreeMap<String, Tensor<F>> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph<f64>, name: &str, t: Tensor<f64>) -> Var {
        g.param(name, &Arc::new(t))
    }

    #[test]
    fn linear_and_quadratic_gradients() {
        let w = Tensor::new(vec![2, 3], vec![1., -2., 3., 0.5, 4., -1.]).unwrap();
        let mut g = Graph::inference();
        let wv = leaf(&mut g, "w", w.clone());
        let s = g.sum(wv);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(wv).unwrap().data().iter().all(|&x| x == 1.0));

        let mut g = Graph::inference();
        let wv = leaf(&mut g, "w", w.clone());
        let sq = g.mul(wv, wv).unwrap();
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        let grads = g.backward(half).unwrap();
        assert_eq!(grads.get(wv).unwrap(), &w);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::inference();
        let w = leaf(&mut g, "w", Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(w), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn repeated_param_registration_shares_node() {
        let mut g = Graph::<f64>::inference();
        let t = Arc::new(Tensor::full(&[2], 1.0));
        let a = g.param("p", &t);
        let b = g.param("p", &t);
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn dropout_is_seeded_and_inverted() {
        let x = Arc::new(Tensor::full(&[1, 1000], 1.0f64));
        let run = |seed| {
            let mut g = Graph::new(seed);
            let v = g.param("x", &x);
            let d = g.dropout(v, 0.25);
            g.value(d).clone()
        };
        let a = run(3);
        assert_eq!(a, run(3));
        assert!(a.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
        let mut g = Graph::inference();
        let v = g.param("x", &x);
        assert_eq!(g.dropout(v, 0.5), v);
    }

    /// Central-difference check of every op with a random scalar readout.
    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rand_t = |shape: &[usize]| Tensor::<f64>::uniform(shape, 1.0, &mut rng);
        let a0 = rand_t(&[3, 4]);
        let b0 = rand_t(&[4, 5]);
        let row0 = rand_t(&[5]);
        let g0 = rand_t(&[5]);
        let readout = rand_t(&[3, 5]);
        let readout2 = rand_t(&[5, 3]);
        let targets = [1usize, 4, 0];

        let build = |a: &Tensor<f64>, b: &Tensor<f64>, row: &Tensor<f64>, gain: &Tensor<f64>| -> (Graph<f64>, Var, [Var; 4]) {
            let mut g = Graph::inference();
            let av = g.param("a", &Arc::new(a.clone()));
            let bv = g.param("b", &Arc::new(b.clone()));
            let rv = g.param("r", &Arc::new(row.clone()));
            let gv = g.param("g", &Arc::new(gain.clone()));
            let m = g.matmul_ex(av, false, bv, false).unwrap();
            let m2 = g.add(m, rv).unwrap();
            let ln = g.layer_norm(m2, gv, rv).unwrap();
            let t = g.tanh(ln);
            let s = g.sigmoid(m2);
            let r = g.relu(m);
            let p = g.mul(t, s).unwrap();
            let p = g.mul(p, gv).unwrap();
            let q = g.add(p, r).unwrap();
            let sm = g.softmax(q, 1).unwrap();
            let sm0 = g.softmax(q, 0).unwrap();
            let cat = g.concat(&[sm, sm0], 0).unwrap();
            let sl = g.slice(cat, 0, 1, 4).unwrap();
            let tr = g.transpose(sl).unwrap();
            let rd = g.constant(readout.clone());
            let rd2 = g.constant(readout2.clone());
            let x1 = g.mul(sl, rd).unwrap();
            let x2 = g.mul(tr, rd2).unwrap();
            let emb = g.embedding(bv, &[0, 2, 2]).unwrap();
            let ce = g.cross_entropy(emb, &targets, 0.1, None).unwrap();
            let bt = g.matmul_ex(av, true, m, false).unwrap();
            let bt2 = g.matmul_ex(bt, false, bv, true).unwrap();
            let s1 = g.sum(x1);
            let s2 = g.sum(x2);
            let s3 = g.sum(bt2);
            let s3 = g.scale(s3, 0.01);
            let tot = g.add(s1, s2).unwrap();
            let tot = g.add(tot, ce).unwrap();
            let tot = g.add(tot, s3).unwrap();
            (g, tot, [av, bv, rv, gv])
        };

        let (g, loss, vars) = build(&a0, &b0, &row0, &g0);
        let grads = g.backward(loss).unwrap();
        let inputs = [a0.clone(), b0.clone(), row0.clone(), g0.clone()];
        let h = 1e-5;
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).unwrap();
            for idx in 0..inputs[k].numel() {
                let eval = |delta: f64| {
                    let mut ins = inputs.clone();
                    ins[k].data_mut()[idx] += delta;
                    let (g, l, _) = build(&ins[0], &ins[1], &ins[2], &ins[3]);
                    g.value(l).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[idx];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!((a - numeric).abs() / denom < 1e-4, "input {k}[{idx}]: analytic {a} vs numeric {numeric}");
            }
        }
    }
}
