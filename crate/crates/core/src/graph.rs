//! Tape-based reverse-mode autodiff.
//!
//! Every node owns its forward value. Operations register a backward closure
//! that maps the output gradient to gradients for each input; inputs that do
//! not require gradients are skipped.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Arguments handed to a backward closure.
pub struct BackwardCtx<'a, T: Real> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    pub needs: Vec<bool>,
}

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new() }
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Node { value, parents: vec![], backward: None, requires_grad: false })
    }

    /// Leaf that receives gradients.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Node { value, parents: vec![], backward: None, requires_grad: true })
    }

    /// Bind a named trainable parameter; repeated calls return the same leaf.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not in the store"))
            .clone();
        let v = if store.is_frozen() { self.constant(value) } else { self.leaf(value) };
        self.params.insert(name.to_string(), v);
        v
    }

    /// Make later `param(store, name)` lookups resolve to an existing leaf.
    pub fn bind_param(&mut self, name: &str, v: Var) {
        self.params.insert(name.to_string(), v);
    }

    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward: Option<BackwardFn<T>> =
            if requires_grad { Some(Box::new(backward)) } else { None };
        self.push(Node { value, parents: inputs.to_vec(), backward, requires_grad })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Reverse pass from a scalar (or seeded with ones for non-scalar) output.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let out_node = &self.nodes[output.0];
        grads[output.0] = Some(Tensor::full(out_node.value.shape(), T::one()));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else { continue };
            let Some(grad) = grads[i].take() else { continue };
            let needs: Vec<bool> =
                node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let ctx = BackwardCtx {
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                output: &node.value,
                grad: &grad,
                needs,
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads, params: self.params.clone() }
    }
}

pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }

    /// Gradients of the bound parameters that belong to `store`, zero-filled
    /// where unused.
    pub fn params(&mut self, store: &ParamStore<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.params {
            if store.get(name).is_none() {
                continue;
            }
            let g = self.grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(store.get(name).unwrap().shape()));
            out.insert(name.clone(), g);
        }
        out
    }
}

// ----- generic elementwise and structural ops -----

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.custom(&[a, b], value, |ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.custom(&[a, b], value, |ctx| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.custom(&[a, b], value, |ctx| {
            let ga = ctx.needs[0].then(|| ctx.grad.zip_map(ctx.inputs[1], |g, y| g * y));
            let gb = ctx.needs[1].then(|| ctx.grad.zip_map(ctx.inputs[0], |g, x| g * x));
            vec![ga, gb]
        })
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a).map(|x| x * k);
        self.custom(&[a], value, move |ctx| vec![Some(ctx.grad.map(|g| g * k))])
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut total = T::zero();
        for &(v, w) in terms {
            total += w * self.value(v).item();
        }
        let weights: Vec<T> = terms.iter().map(|t| t.1).collect();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.custom(&vars, Tensor::scalar(total), move |ctx| {
            let g = ctx.grad.item();
            weights.iter().map(|&w| Some(Tensor::scalar(g * w))).collect()
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.custom(&[a], value, |ctx| {
            vec![Some(ctx.grad.zip_map(ctx.output, |g, y| if y > T::zero() { g } else { T::zero() }))]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.custom(&[a], value, |ctx| {
            vec![Some(ctx.grad.zip_map(ctx.output, |g, y| g * y * (T::one() - y)))]
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let in_shape = self.value(a).shape().to_vec();
        let value = self.value(a).reshaped(shape).expect("reshape element count");
        self.custom(&[a], value, move |ctx| {
            vec![Some(ctx.grad.reshaped(&in_shape).expect("reshape back"))]
        })
    }

    /// Mean over the leading axis, keeping it with size 1.
    pub fn mean_batch(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.shape()[0];
        let stride = x.len() / n;
        let inv = T::one() / T::from_usize(n).unwrap();
        let mut out = vec![T::zero(); stride];
        for b in 0..n {
            for (o, &v) in out.iter_mut().zip(&x.data()[b * stride..(b + 1) * stride]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let mut shape = x.shape().to_vec();
        shape[0] = 1;
        let in_shape = x.shape().to_vec();
        self.custom(&[a], Tensor::new(&shape, out).unwrap(), move |ctx| {
            let g = ctx.grad.data();
            let data: Vec<T> = (0..n).flat_map(|_| g.iter().map(|&v| v * inv)).collect();
            vec![Some(Tensor::new(&in_shape, data).unwrap())]
        })
    }

    /// Repeat a batch-1 tensor `n` times along the leading axis.
    pub fn repeat_batch(&mut self, a: Var, n: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape()[0], 1, "repeat_batch expects a batch of one");
        let mut shape = x.shape().to_vec();
        shape[0] = n;
        let data: Vec<T> = (0..n).flat_map(|_| x.data().iter().copied()).collect();
        let stride = x.len();
        let in_shape = x.shape().to_vec();
        self.custom(&[a], Tensor::new(&shape, data).unwrap(), move |ctx| {
            let mut g = vec![T::zero(); stride];
            for chunk in ctx.grad.data().chunks(stride) {
                for (o, &v) in g.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            vec![Some(Tensor::new(&in_shape, g).unwrap())]
        })
    }

    /// Channelwise softmax over axis 1 of a 4-D tensor.
    pub fn softmax_channels(&mut self, a: Var) -> Var {
        let value = softmax_channels(self.value(a));
        self.custom(&[a], value, |ctx| {
            let (n, c, h, w) = ctx.output.dims4();
            let hw = h * w;
            let y = ctx.output.data();
            let g = ctx.grad.data();
            let mut out = vec![T::zero(); y.len()];
            for b in 0..n {
                for p in 0..hw {
                    let mut dot = T::zero();
                    for k in 0..c {
                        let i = (b * c + k) * hw + p;
                        dot += y[i] * g[i];
                    }
                    for k in 0..c {
                        let i = (b * c + k) * hw + p;
                        out[i] = y[i] * (g[i] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(ctx.output.shape(), out).unwrap())]
        })
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pn, pc, ph, pw) = self.value(p).dims4();
                assert_eq!((pn, ph, pw), (n, h, w), "concat_channels shape mismatch");
                pc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let value = Tensor::new(&[n, total, h, w], data).unwrap();
        self.custom(parts, value, move |ctx| {
            let mut start = 0;
            widths
                .iter()
                .zip(&ctx.needs)
                .map(|(&c, &need)| {
                    let g = need.then(|| ctx.grad.channels(start, c));
                    start += c;
                    g
                })
                .collect()
        })
    }

    /// Sum of all elements into a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let shape = self.value(a).shape().to_vec();
        self.custom(&[a], value, move |ctx| vec![Some(Tensor::full(&shape, ctx.grad.item()))])
    }

    /// Sum of `a * w` for a constant weight tensor `w`.
    pub fn dot_const(&mut self, a: Var, w: &Tensor<T>) -> Var {
        let value = Tensor::scalar(
            self.value(a).data().iter().zip(w.data()).map(|(&x, &y)| x * y).sum(),
        );
        let w = w.clone();
        self.custom(&[a], value, move |ctx| {
            let g = ctx.grad.item();
            vec![Some(w.map(|v| v * g))]
        })
    }
}

pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let d = x.data();
    let mut out = vec![T::zero(); d.len()];
    for b in 0..n {
        for p in 0..hw {
            let mut m = T::neg_infinity();
            for k in 0..c {
                m = m.max(d[(b * c + k) * hw + p]);
            }
            let mut s = T::zero();
            for k in 0..c {
                let i = (b * c + k) * hw + p;
                let e = (d[i] - m).exp();
                out[i] = e;
                s += e;
            }
            for k in 0..c {
                out[(b * c + k) * hw + p] /= s;
            }
        }
    }
    Tensor::new(x.shape(), out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_rule_through_mul_and_add() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let y = g.leaf(Tensor::new(&[2], vec![3.0, -1.0]).unwrap());
        let xy = g.mul(x, y);
        let z = g.add(xy, x);
        let s = g.sum(z);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, 0.0]);
        assert_eq!(grads.get(y).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(5.0));
        let p = g.mul(x, c);
        let grads = g.backward(p);
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let x = Tensor::<f64>::from_fn(&[2, 4, 2, 3], |i| ((i * 37) % 11) as f64 * 0.3 - 1.0);
        let s = softmax_channels(&x);
        let (n, c, h, w) = s.dims4();
        for b in 0..n {
            for p in 0..h * w {
                let total: f64 = (0..c).map(|k| s[(b * c + k) * h * w + p]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        let shifted = softmax_channels(&x.map(|v| v + 7.5));
        assert!(s.max_abs_diff(&shifted) < 1e-12);
    }

    #[test]
    fn mean_batch_and_repeat_are_adjoint() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[3, 2], |i| i as f64));
        let m = g.mean_batch(x);
        assert_eq!(g.value(m).data(), &[2.0, 3.0]);
        let r = g.repeat_batch(m, 4);
        let s = g.sum(r);
        let grads = g.backward(s);
        // d/dx of 4 * sum(mean) = 4/3 per element
        for &v in grads.get(x).unwrap().data() {
            assert!((v - 4.0 / 3.0).abs() < 1e-12);
        }
    }
}
