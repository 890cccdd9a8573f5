//! Reverse-mode automatic differentiation over `f64` arrays.
//!
//! The engine is a flat tape: every operation appends a node holding the
//! forward value and (when gradients are enabled) a closure that routes the
//! output gradient to the node's inputs. Node ids increase monotonically, so
//! a single reverse sweep visits consumers before producers and each node's
//! gradient is complete when its closure runs.
//!
//! Everything is double precision and single-threaded per graph; graphs are
//! cheap to build and are dropped after each training step.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};
use std::cell::RefCell;
use std::rc::Rc;

/// Routes `grad_out` for one node into the gradient slots of its inputs.
type BackFn = Box<dyn Fn(&ArrayD<f64>, &[ArrayD<f64>], &mut [Option<ArrayD<f64>>])>;

struct Node {
    value: ArrayD<f64>,
    back: Option<BackFn>,
}

struct GraphInner {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

/// A computation graph. Clones share the same underlying tape.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    id: usize,
}

/// Gradients produced by [`Graph::backward`], indexed by node id.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the given tensor; zeros if it never
    /// received any gradient.
    pub fn get(&self, t: &Tensor) -> ArrayD<f64> {
        match &self.grads[t.id] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(t.graph.value_of(t.id).raw_dim()),
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                nodes: Vec::new(),
                grad_enabled: true,
            })),
        }
    }

    /// Graph that records no backward closures; forward values only.
    pub fn new_no_grad() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                nodes: Vec::new(),
                grad_enabled: false,
            })),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.inner.borrow().grad_enabled
    }

    fn push(&self, value: ArrayD<f64>, back: Option<BackFn>) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let back = if inner.grad_enabled { back } else { None };
        inner.nodes.push(Node { value, back });
        Tensor {
            graph: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    /// Insert a leaf (input or parameter) node.
    pub fn leaf(&self, value: ArrayD<f64>) -> Tensor {
        self.push(value, None)
    }

    /// Insert a constant; identical to `leaf` but signals intent.
    pub fn constant(&self, value: ArrayD<f64>) -> Tensor {
        self.push(value, None)
    }

    /// Insert a node with no backward closure (custom ops, no-grad paths).
    pub fn push_nograd(&self, value: ArrayD<f64>) -> Tensor {
        self.push(value, None)
    }

    /// Insert a node with an explicit backward closure (custom ops).
    pub fn push_op(
        &self,
        value: ArrayD<f64>,
        back: Box<dyn Fn(&ArrayD<f64>, &[ArrayD<f64>], &mut [Option<ArrayD<f64>>])>,
    ) -> Tensor {
        self.push(value, Some(back))
    }

    fn value_of(&self, id: usize) -> ArrayD<f64> {
        self.inner.borrow().nodes[id].value.clone()
    }

    /// Reverse sweep seeding `loss` with gradient 1. `loss` must be scalar.
    pub fn backward(&self, loss: &Tensor) -> Gradients {
        let inner = self.inner.borrow();
        assert!(
            inner.grad_enabled,
            "backward called on a no-grad graph"
        );
        assert_eq!(inner.nodes[loss.id].value.len(), 1, "loss must be scalar");
        let n = inner.nodes.len();
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(ArrayD::from_elem(
            inner.nodes[loss.id].value.raw_dim(),
            1.0,
        ));
        let values: Vec<ArrayD<f64>> = inner.nodes.iter().map(|n| n.value.clone()).collect();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(back) = &inner.nodes[id].back {
                back(&g, &values, &mut grads);
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate(slot: &mut Option<ArrayD<f64>>, incr: &ArrayD<f64>) {
    match slot {
        Some(g) => *g += incr,
        None => *slot = Some(incr.clone()),
    }
}

fn accumulate_owned(slot: &mut Option<ArrayD<f64>>, incr: ArrayD<f64>) {
    match slot {
        Some(g) => *g += &incr,
        None => *slot = Some(incr),
    }
}

/// Accumulate a gradient contribution for node `id` (custom-op backends).
pub fn acc_grad(grads: &mut [Option<ArrayD<f64>>], id: usize, incr: ArrayD<f64>) {
    accumulate_owned(&mut grads[id], incr);
}

/// Broadcast `shape_small` against `shape_big` (numpy right-aligned rules) and
/// return, for a gradient of shape `shape_big`, the axes to sum over plus
/// whether a final reshape to `shape_small` is needed.
fn broadcast_reduce_axes(small: &[usize], big: &[usize]) -> Vec<usize> {
    let offset = big.len() - small.len();
    let mut axes = Vec::new();
    for (i, &b) in big.iter().enumerate() {
        if i < offset {
            axes.push(i);
        } else if small[i - offset] == 1 && b != 1 {
            axes.push(i);
        }
    }
    axes
}

fn reduce_to_shape(grad: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let axes = broadcast_reduce_axes(shape, grad.shape());
    let mut g = grad.clone();
    for &ax in axes.iter().rev() {
        g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax)).into_dyn();
    }
    g.into_shape_with_order(IxDyn(shape)).unwrap()
}

fn broadcast_shapes(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i >= rank - a.len() { a[i - (rank - a.len())] } else { 1 };
        let db = if i >= rank - b.len() { b[i - (rank - b.len())] } else { 1 };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast {:?} vs {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

fn bcast(v: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    v.broadcast(IxDyn(shape)).unwrap().to_owned()
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> Graph {
        self.graph.clone()
    }

    pub fn value(&self) -> ArrayD<f64> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1);
        v.iter().next().copied().unwrap()
    }

    fn same_graph(&self, other: &Tensor) {
        assert!(
            Rc::ptr_eq(&self.graph.inner, &other.graph.inner),
            "tensors belong to different graphs"
        );
    }

    // ---- elementwise binary ops with broadcasting ----

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.same_graph(other);
        let (a, b) = (self.value(), other.value());
        let out_shape = broadcast_shapes(a.shape(), b.shape());
        let out = &bcast(&a, &out_shape) + &bcast(&b, &out_shape);
        let (ia, ib) = (self.id, other.id);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph.push(
            out,
            Some(Box::new(move |g, _v, grads| {
                accumulate_owned(&mut grads[ia], reduce_to_shape(g, &sa));
                accumulate_owned(&mut grads[ib], reduce_to_shape(g, &sb));
            })),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.add(&other.neg())
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.same_graph(other);
        let (a, b) = (self.value(), other.value());
        let out_shape = broadcast_shapes(a.shape(), b.shape());
        let (ab, bb) = (bcast(&a, &out_shape), bcast(&b, &out_shape));
        let out = &ab * &bb;
        let (ia, ib) = (self.id, other.id);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph.push(
            out,
            Some(Box::new(move |g, _v, grads| {
                accumulate_owned(&mut grads[ia], reduce_to_shape(&(g * &bb), &sa));
                accumulate_owned(&mut grads[ib], reduce_to_shape(&(g * &ab), &sb));
            })),
        )
    }

    pub fn neg(&self) -> Tensor {
        let out = -&self.value();
        let ia = self.id;
        self.graph.push(
            out,
            Some(Box::new(move |g, _v, grads| {
                accumulate_owned(&mut grads[ia], -g);
            })),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = &self.value() + c;
        let ia = self.id;
        self.graph.push(
            out,
            Some(Box::new(move |g, _v, grads| {
                accumulate(&mut grads[ia], g);
            })),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let out = &self.value() * c;
        let ia = self.id;
        self.graph.push(
            out,
            Some(Box::new(move |g, _v, grads| {
                accumulate_owned(&mut grads[ia], g * c);
            })),
        )
    }

    /// Exact scalar division (IEEE division, not reciprocal multiply).
    pub fn div_scalar(&self, c: f64) -> Tensor {
        let out = &self.value() / c;
        let ia = self.id;
        self.graph.push(
            out,
            Some(Box::new(move |g, _v, grads| {
                accumulate_owned(&mut grads[ia], g / c);
            })),
        )
    }

    /// Elementwise reciprocal.
    pub fn recip(&self) -> Tensor {
        let v = self.value();
        let out = v.mapv(|x| 1.0 / x);
        let ia = self.id;
        let o = out.clone();
        self.graph.push(
            out,
            Some(Box::new(move |g, _v, grads| {
                accumulate_owned(&mut grads[ia], -(g * &o * &o));
            })),
        )
    }

    pub fn sqrt(&self) -> Tensor {
        let out = self.value().mapv(f64::sqrt);
        let ia = self.id;
        let o = out.clone();
        self.graph.push(
            out,
            Some(Box::new(move |g, _v, grads| {
                accumulate_owned(&mut grads[ia], g * &o.mapv(|y| 0.5 / y));
            })),
        )
    }

    pub fn exp(&self) -> Tensor {
        let out = self.value().mapv(f64::exp);
        let ia = self.id;
        let o = out.clone();
        self.graph.push(
            out,
            Some(Box::new(move |g, _v, grads| {
                accumulate_owned(&mut grads[ia], g * &o);
            })),
        )
    }

    // ---- activations ----

    pub fn relu(&self) -> Tensor {
        let v = self.value();
        let out = v.mapv(|x| x.max(0.0));
        let ia = self.id;
        let mask = v.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.graph.push(
            out,
            Some(Box::new(move |g, _v, grads| {
                accumulate_owned(&mut grads[ia], g * &mask);
            })),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let out = self.value().mapv(stable_sigmoid);
        let ia = self.id;
        let o = out.clone();
        self.graph.push(
            out,
            Some(Box::new(move |g, _v, grads| {
                accumulate_owned(&mut grads[ia], g * &(&o * &o.mapv(|s| 1.0 - s)));
            })),
        )
    }

    /// x * sigmoid(x)
    pub fn silu(&self) -> Tensor {
        let v = self.value();
        let s = v.mapv(stable_sigmoid);
        let out = &v * &s;
        let ia = self.id;
        let der = &s + &(&v * &(&s * &s.mapv(|y| 1.0 - y)));
        self.graph.push(
            out,
            Some(Box::new(move |g, _v, grads| {
                accumulate_owned(&mut grads[ia], g * &der);
            })),
        )
    }

    /// tanh-form GELU.
    pub fn gelu(&self) -> Tensor {
        let v = self.value();
        let out = v.mapv(gelu_val);
        let ia = self.id;
        let der = v.mapv(gelu_der);
        self.graph.push(
            out,
            Some(Box::new(move |g, _v, grads| {
                accumulate_owned(&mut grads[ia], g * &der);
            })),
        )
    }

    /// ln(1 + e^x), numerically stable; output floored at a tiny positive
    /// value so downstream step sizes stay strictly positive.
    pub fn softplus(&self) -> Tensor {
        let v = self.value();
        let out = v.mapv(softplus_val);
        let ia = self.id;
        let der = v.mapv(stable_sigmoid);
        self.graph.push(
            out,
            Some(Box::new(move |g, _v, grads| {
                accumulate_owned(&mut grads[ia], g * &der);
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor {
        let v = self.value();
        let out = ArrayD::from_elem(IxDyn(&[1]), v.sum());
        let ia = self.id;
        let shape = v.raw_dim();
        self.graph.push(
            out,
            Some(Box::new(move |g, _v, grads| {
                let s = g.iter().next().copied().unwrap();
                accumulate_owned(&mut grads[ia], ArrayD::from_elem(shape.clone(), s));
            })),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.value().len() as f64;
        self.sum_all().div_scalar(n)
    }

    /// Maximum over all elements; gradient flows to the first (row-major)
    /// occurrence of the maximum.
    pub fn max_all(&self) -> Tensor {
        let v = self.value();
        let mut best = f64::NEG_INFINITY;
        let mut best_idx = 0usize;
        for (i, &x) in v.iter().enumerate() {
            if x > best {
                best = x;
                best_idx = i;
            }
        }
        let out = ArrayD::from_elem(IxDyn(&[1]), best);
        let ia = self.id;
        let shape = v.raw_dim();
        self.graph.push(
            out,
            Some(Box::new(move |g, _v, grads| {
                let s = g.iter().next().copied().unwrap();
                let mut z = ArrayD::zeros(shape.clone());
                z.as_slice_mut().unwrap()[best_idx] = s;
                accumulate_owned(&mut grads[ia], z);
            })),
        )
    }

    /// Mean over the spatial axes of a (C, H, W) tensor, kept as (C, 1, 1).
    pub fn mean_spatial(&self) -> Tensor {
        let v3 = as3(&self.value());
        let (c, h, w) = v3.dim();
        let m = (h * w) as f64;
        let mut out = Array3::<f64>::zeros((c, 1, 1));
        for ci in 0..c {
            out[[ci, 0, 0]] = v3.index_axis(Axis(0), ci).sum() / m;
        }
        let ia = self.id;
        self.graph.push(
            out.into_dyn(),
            Some(Box::new(move |g, _v, grads| {
                let g3 = as3(g);
                let mut z = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    let gv = g3[[ci, 0, 0]] / m;
                    z.index_axis_mut(Axis(0), ci).mapv_inplace(|_| gv);
                }
                accumulate_owned(&mut grads[ia], z.into_dyn());
            })),
        )
    }

    /// Gather a list of flat (row-major) positions into a 1-D tensor.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let v = self.value();
        let flat = v.as_slice().expect("gather needs contiguous input");
        let out = Array1::from_iter(indices.iter().map(|&i| flat[i]));
        let ia = self.id;
        let shape = v.raw_dim();
        let idx: Vec<usize> = indices.to_vec();
        self.graph.push(
            out.into_dyn(),
            Some(Box::new(move |g, _v, grads| {
                let mut z = ArrayD::zeros(shape.clone());
                let zs = z.as_slice_mut().unwrap();
                for (k, &i) in idx.iter().enumerate() {
                    zs[i] += g.as_slice().unwrap()[k];
                }
                accumulate_owned(&mut grads[ia], z);
            })),
        )
    }

    /// Softmax over a 1-D tensor, computed with max subtraction.
    pub fn softmax(&self) -> Tensor {
        let v = self.value();
        assert_eq!(v.ndim(), 1);
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e = v.mapv(|x| (x - max).exp());
        let sum: f64 = e.sum();
        let out = e.mapv(|x| x / sum);
        let ia = self.id;
        let o = out.clone();
        self.graph.push(
            out,
            Some(Box::new(move |g, _v, grads| {
                let dot: f64 = (g * &o).sum();
                accumulate_owned(&mut grads[ia], &o * &(g - dot));
            })),
        )
    }

    // ---- linear algebra ----

    /// (M, K) x (K, N) matrix product.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.same_graph(other);
        let a = as2(&self.value());
        let b = as2(&other.value());
        let out = a.dot(&b);
        let (ia, ib) = (self.id, other.id);
        self.graph.push(
            out.into_dyn(),
            Some(Box::new(move |g, v, grads| {
                let g2 = as2(g);
                let a = as2(&v[ia]);
                let b = as2(&v[ib]);
                accumulate_owned(&mut grads[ia], g2.dot(&b.t()).into_dyn());
                accumulate_owned(&mut grads[ib], a.t().dot(&g2).into_dyn());
            })),
        )
    }

    // ---- shape ops ----

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let v = self.value();
        let orig = v.shape().to_vec();
        let out = v.into_shape_with_order(IxDyn(shape)).unwrap();
        let ia = self.id;
        self.graph.push(
            out,
            Some(Box::new(move |g, _v, grads| {
                accumulate_owned(
                    &mut grads[ia],
                    g.clone().into_shape_with_order(IxDyn(&orig)).unwrap(),
                );
            })),
        )
    }

    /// (C, H, W) -> (H*W, C) row-major sequence of per-pixel feature vectors.
    pub fn to_sequence(&self) -> Tensor {
        let v = as3(&self.value());
        let (c, h, w) = v.dim();
        let mut out = Array2::<f64>::zeros((h * w, c));
        for ci in 0..c {
            for r in 0..h {
                for x in 0..w {
                    out[[r * w + x, ci]] = v[[ci, r, x]];
                }
            }
        }
        let ia = self.id;
        self.graph.push(
            out.into_dyn(),
            Some(Box::new(move |g, _v, grads| {
                let g2 = as2(g);
                let mut z = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for r in 0..h {
                        for x in 0..w {
                            z[[ci, r, x]] = g2[[r * w + x, ci]];
                        }
                    }
                }
                accumulate_owned(&mut grads[ia], z.into_dyn());
            })),
        )
    }

    /// Inverse of [`Tensor::to_sequence`]: (H*W, C) -> (C, H, W).
    pub fn from_sequence(&self, h: usize, w: usize) -> Tensor {
        let v = as2(&self.value());
        let (l, c) = v.dim();
        assert_eq!(l, h * w);
        let mut out = Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            for r in 0..h {
                for x in 0..w {
                    out[[ci, r, x]] = v[[r * w + x, ci]];
                }
            }
        }
        let ia = self.id;
        self.graph.push(
            out.into_dyn(),
            Some(Box::new(move |g, _v, grads| {
                let g3 = as3(g);
                let mut z = Array2::<f64>::zeros((l, c));
                for ci in 0..c {
                    for r in 0..h {
                        for x in 0..w {
                            z[[r * w + x, ci]] = g3[[ci, r, x]];
                        }
                    }
                }
                accumulate_owned(&mut grads[ia], z.into_dyn());
            })),
        )
    }

    /// Reorder the rows of an (L, C) tensor: `out[k] = in[perm[k]]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Tensor {
        let v = as2(&self.value());
        let (l, c) = v.dim();
        assert_eq!(perm.len(), l);
        let mut out = Array2::<f64>::zeros((l, c));
        for (k, &src) in perm.iter().enumerate() {
            out.row_mut(k).assign(&v.row(src));
        }
        let ia = self.id;
        let perm: Vec<usize> = perm.to_vec();
        self.graph.push(
            out.into_dyn(),
            Some(Box::new(move |g, _v, grads| {
                let g2 = as2(g);
                let mut z = Array2::<f64>::zeros((l, c));
                for (k, &src) in perm.iter().enumerate() {
                    let mut row = z.row_mut(src);
                    row += &g2.row(k);
                }
                accumulate_owned(&mut grads[ia], z.into_dyn());
            })),
        )
    }

    /// Concatenate (C_i, H, W) tensors along the channel axis.
    pub fn concat_channels(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let graph = parts[0].graph.clone();
        for p in parts {
            parts[0].same_graph(p);
        }
        let vals: Vec<Array3<f64>> = parts.iter().map(|p| as3(&p.value())).collect();
        let (_, h, w) = vals[0].dim();
        let total_c: usize = vals.iter().map(|v| v.dim().0).sum();
        let mut out = Array3::<f64>::zeros((total_c, h, w));
        let mut offset = 0usize;
        let mut spans = Vec::new();
        for v in &vals {
            let c = v.dim().0;
            out.slice_mut(ndarray::s![offset..offset + c, .., ..]).assign(v);
            spans.push((offset, c));
            offset += c;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        graph.push(
            out.into_dyn(),
            Some(Box::new(move |g, _v, grads| {
                let g3 = as3(g);
                for (slot, &(off, c)) in ids.iter().zip(spans.iter()) {
                    let piece = g3.slice(ndarray::s![off..off + c, .., ..]).to_owned();
                    accumulate_owned(&mut grads[*slot], piece.into_dyn());
                }
            })),
        )
    }

    /// Slice channels `[start, end)` of a (C, H, W) tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Tensor {
        let v = as3(&self.value());
        let (c, h, w) = v.dim();
        assert!(start < end && end <= c);
        let out = v.slice(ndarray::s![start..end, .., ..]).to_owned();
        let ia = self.id;
        self.graph.push(
            out.into_dyn(),
            Some(Box::new(move |g, _v, grads| {
                let g3 = as3(g);
                let mut z = Array3::<f64>::zeros((c, h, w));
                z.slice_mut(ndarray::s![start..end, .., ..]).assign(&g3);
                accumulate_owned(&mut grads[ia], z.into_dyn());
            })),
        )
    }

    // ---- normalization ----

    /// Per-channel normalization over the spatial extent of a (C, H, W)
    /// tensor with learnable per-channel scale and shift.
    pub fn norm2d(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        self.same_graph(gamma);
        self.same_graph(beta);
        let v = as3(&self.value());
        let gm = as1(&gamma.value());
        let bt = as1(&beta.value());
        let (c, h, w) = v.dim();
        let m = (h * w) as f64;
        let mut xhat = Array3::<f64>::zeros((c, h, w));
        let mut inv_std = Array1::<f64>::zeros(c);
        let mut out = Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            let plane = v.index_axis(Axis(0), ci);
            let mu = plane.sum() / m;
            let var = plane.mapv(|x| (x - mu) * (x - mu)).sum() / m;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[ci] = is;
            for r in 0..h {
                for x in 0..w {
                    let xh = (v[[ci, r, x]] - mu) * is;
                    xhat[[ci, r, x]] = xh;
                    out[[ci, r, x]] = gm[ci] * xh + bt[ci];
                }
            }
        }
        let (ia, ig, ib) = (self.id, gamma.id, beta.id);
        self.graph.push(
            out.into_dyn(),
            Some(Box::new(move |g, _v, grads| {
                let g3 = as3(g);
                let mut dx = Array3::<f64>::zeros((c, h, w));
                let mut dg = Array1::<f64>::zeros(c);
                let mut db = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    let gp = g3.index_axis(Axis(0), ci);
                    let xh = xhat.index_axis(Axis(0), ci);
                    let sum_g: f64 = gp.sum();
                    let sum_gx: f64 = (&gp * &xh).sum();
                    dg[ci] = sum_gx;
                    db[ci] = sum_g;
                    let k = gm[ci] * inv_std[ci];
                    for r in 0..h {
                        for x in 0..w {
                            dx[[ci, r, x]] =
                                k * (gp[[r, x]] - sum_g / m - xh[[r, x]] * sum_gx / m);
                        }
                    }
                }
                accumulate_owned(&mut grads[ia], dx.into_dyn());
                accumulate_owned(&mut grads[ig], dg.into_dyn());
                accumulate_owned(&mut grads[ib], db.into_dyn());
            })),
        )
    }

    /// Layer normalization across the channel axis of a (C, H, W) tensor,
    /// per spatial position, with per-channel scale and shift.
    pub fn layer_norm_chw(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        self.same_graph(gamma);
        self.same_graph(beta);
        let v = as3(&self.value());
        let gm = as1(&gamma.value());
        let bt = as1(&beta.value());
        let (c, h, w) = v.dim();
        let m = c as f64;
        let mut xhat = Array3::<f64>::zeros((c, h, w));
        let mut inv_std = Array2::<f64>::zeros((h, w));
        let mut out = Array3::<f64>::zeros((c, h, w));
        for r in 0..h {
            for x in 0..w {
                let mut mu = 0.0;
                for ci in 0..c {
                    mu += v[[ci, r, x]];
                }
                mu /= m;
                let mut var = 0.0;
                for ci in 0..c {
                    let d = v[[ci, r, x]] - mu;
                    var += d * d;
                }
                var /= m;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[[r, x]] = is;
                for ci in 0..c {
                    let xh = (v[[ci, r, x]] - mu) * is;
                    xhat[[ci, r, x]] = xh;
                    out[[ci, r, x]] = gm[ci] * xh + bt[ci];
                }
            }
        }
        let (ia, ig, ib) = (self.id, gamma.id, beta.id);
        self.graph.push(
            out.into_dyn(),
            Some(Box::new(move |g, _v, grads| {
                let g3 = as3(g);
                let mut dx = Array3::<f64>::zeros((c, h, w));
                let mut dg = Array1::<f64>::zeros(c);
                let mut db = Array1::<f64>::zeros(c);
                for r in 0..h {
                    for x in 0..w {
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for ci in 0..c {
                            let gg = g3[[ci, r, x]] * gm[ci];
                            sum_g += gg;
                            sum_gx += gg * xhat[[ci, r, x]];
                            dg[ci] += g3[[ci, r, x]] * xhat[[ci, r, x]];
                            db[ci] += g3[[ci, r, x]];
                        }
                        let is = inv_std[[r, x]];
                        for ci in 0..c {
                            let gg = g3[[ci, r, x]] * gm[ci];
                            dx[[ci, r, x]] =
                                is * (gg - sum_g / m - xhat[[ci, r, x]] * sum_gx / m);
                        }
                    }
                }
                accumulate_owned(&mut grads[ia], dx.into_dyn());
                accumulate_owned(&mut grads[ig], dg.into_dyn());
                accumulate_owned(&mut grads[ib], db.into_dyn());
            })),
        )
    }
}

// ---- scalar helpers ----

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_val(x: f64) -> f64 {
    let v = if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    };
    v.max(1e-300)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_der(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

// ---- shape coercion helpers (shared with other modules) ----

pub(crate) fn as1(v: &ArrayD<f64>) -> Array1<f64> {
    v.clone().into_dimensionality().unwrap()
}

pub(crate) fn as2(v: &ArrayD<f64>) -> Array2<f64> {
    v.clone().into_dimensionality().unwrap()
}

pub(crate) fn as3(v: &ArrayD<f64>) -> Array3<f64> {
    v.clone().into_dimensionality().unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::test_util::finite_diff_check;
    use ndarray::{arr1, arr2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_arr(shape: &[usize], rng: &mut ChaCha12Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn add_mul_broadcast_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let a = rand_arr(&[3, 4, 5], &mut rng);
        let b = rand_arr(&[3, 1, 1], &mut rng);
        let rel = finite_diff_check(&[a.clone(), b.clone()], |_g, xs| {
            xs[0].add(&xs[1]).mul(&xs[0]).mul(&xs[1]).sum_all().mul_scalar(0.1)
        });
        assert!(rel < 1e-6, "rel err {rel}");
    }

    #[test]
    fn activation_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let a = rand_arr(&[4, 4], &mut rng);
        for f in [
            (|t: &Tensor| t.relu()) as fn(&Tensor) -> Tensor,
            |t| t.sigmoid(),
            |t| t.silu(),
            |t| t.gelu(),
            |t| t.softplus(),
            |t| t.exp(),
            |t| t.add_scalar(2.5).sqrt(),
            |t| t.add_scalar(3.0).recip(),
        ] {
            let rel = finite_diff_check(&[a.clone()], |_g, xs| f(&xs[0]).sum_all());
            assert!(rel < 1e-6, "rel err {rel}");
        }
    }

    #[test]
    fn matmul_grad() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let a = rand_arr(&[3, 4], &mut rng);
        let b = rand_arr(&[4, 2], &mut rng);
        let rel = finite_diff_check(&[a, b], |_g, xs| xs[0].matmul(&xs[1]).mul(&xs[0].matmul(&xs[1])).sum_all());
        assert!(rel < 1e-6, "rel err {rel}");
    }

    #[test]
    fn softmax_properties_and_grad() {
        let g = Graph::new();
        let a = g.leaf(arr1(&[1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln(), 4.0f64.ln()]).into_dyn());
        let w = a.softmax().value();
        let expect = [0.1, 0.2, 0.3, 0.4];
        for (x, e) in w.iter().zip(expect.iter()) {
            assert!((x - e).abs() < 1e-12);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let a = rand_arr(&[5], &mut rng);
        let r = rand_arr(&[5], &mut rng);
        let rel = finite_diff_check(&[a], |g, xs| {
            let rr = g.constant(r.clone());
            xs[0].softmax().mul(&rr).sum_all()
        });
        assert!(rel < 1e-6, "rel err {rel}");
    }

    #[test]
    fn norm_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = rand_arr(&[3, 4, 4], &mut rng);
        let gm = rand_arr(&[3], &mut rng);
        let bt = rand_arr(&[3], &mut rng);
        let r = rand_arr(&[3, 4, 4], &mut rng);
        for mode in 0..2 {
            let r = r.clone();
            let rel = finite_diff_check(&[x.clone(), gm.clone(), bt.clone()], move |g, xs| {
                let rr = g.constant(r.clone());
                let y = if mode == 0 {
                    xs[0].norm2d(&xs[1], &xs[2], 1e-5)
                } else {
                    xs[0].layer_norm_chw(&xs[1], &xs[2], 1e-5)
                };
                y.mul(&rr).sum_all()
            });
            assert!(rel < 1e-5, "mode {mode} rel err {rel}");
        }
    }

    #[test]
    fn sequence_roundtrip_and_permute() {
        let g = Graph::new();
        let x = g.leaf(
            arr2(&[[1.0, 2.0], [3.0, 4.0]])
                .into_shape_with_order(IxDyn(&[1, 2, 2]))
                .unwrap(),
        );
        let seq = x.to_sequence();
        assert_eq!(as2(&seq.value()).column(0).to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        let back = seq.from_sequence(2, 2);
        assert_eq!(back.value(), x.value());
        let perm = [3, 2, 1, 0];
        let rev = seq.permute_rows(&perm);
        assert_eq!(as2(&rev.value()).column(0).to_vec(), vec![4.0, 3.0, 2.0, 1.0]);

        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let x = rand_arr(&[2, 3, 4], &mut rng);
        let r = rand_arr(&[12, 2], &mut rng);
        let perm: Vec<usize> = (0..12).rev().collect();
        let rel = finite_diff_check(&[x], move |g, xs| {
            let rr = g.constant(r.clone());
            xs[0].to_sequence().permute_rows(&perm).mul(&rr).sum_all()
        });
        assert!(rel < 1e-6, "rel err {rel}");
    }

    #[test]
    fn concat_slice_gather_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let a = rand_arr(&[2, 3, 3], &mut rng);
        let b = rand_arr(&[3, 3, 3], &mut rng);
        let rel = finite_diff_check(&[a, b], |_g, xs| {
            let cat = Tensor::concat_channels(&[xs[0].clone(), xs[1].clone()]);
            let sl = cat.slice_channels(1, 4);
            sl.gather(&[0, 5, 7, 12]).sum_all()
        });
        assert!(rel < 1e-6, "rel err {rel}");
    }

    #[test]
    fn max_and_mean_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let a = rand_arr(&[4, 5], &mut rng);
        let rel = finite_diff_check(&[a.clone()], |_g, xs| {
            xs[0].max_all().add(&xs[0].mean_all()).sum_all()
        });
        assert!(rel < 1e-6, "rel err {rel}");
        let x = rand_arr(&[3, 4, 4], &mut rng);
        let rel = finite_diff_check(&[x], |_g, xs| {
            xs[0].sub(&xs[0].mean_spatial()).mul(&xs[0]).sum_all()
        });
        assert!(rel < 1e-6, "rel err {rel}");
    }

    #[test]
    fn no_grad_graph_records_nothing() {
        let g = Graph::new_no_grad();
        let a = g.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 1.5));
        let y = a.mul(&a).sum_all();
        assert!((y.scalar() - 9.0).abs() < 1e-12);
        assert!(!g.grad_enabled());
    }
}

/// Finite-difference utilities shared by gradient tests across the crate.
pub mod test_util {
    use super::*;

    /// Central finite-difference check. Builds the scalar loss via `f` from
    /// leaf tensors for `inputs`, compares analytic gradients against central
    /// differences with step 1e-5, and returns the worst relative error
    /// (L2 norm of the difference over the L2 norm of the reference).
    pub fn finite_diff_check(
        inputs: &[ArrayD<f64>],
        f: impl Fn(&Graph, &[Tensor]) -> Tensor,
    ) -> f64 {
        finite_diff_check_step(inputs, 1e-5, f)
    }

    pub fn finite_diff_check_step(
        inputs: &[ArrayD<f64>],
        step: f64,
        f: impl Fn(&Graph, &[Tensor]) -> Tensor,
    ) -> f64 {
        let g = Graph::new();
        let leaves: Vec<Tensor> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
        let loss = f(&g, &leaves);
        let grads = g.backward(&loss);
        let analytic: Vec<ArrayD<f64>> = leaves.iter().map(|t| grads.get(t)).collect();

        let eval = |xs: &[ArrayD<f64>]| -> f64 {
            let g = Graph::new_no_grad();
            let leaves: Vec<Tensor> = xs.iter().map(|x| g.leaf(x.clone())).collect();
            f(&g, &leaves).scalar()
        };

        let mut worst: f64 = 0.0;
        for (i, input) in inputs.iter().enumerate() {
            let mut fd = ArrayD::zeros(input.raw_dim());
            for idx in 0..input.len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[i].as_slice_mut().unwrap()[idx] += step;
                minus[i].as_slice_mut().unwrap()[idx] -= step;
                fd.as_slice_mut().unwrap()[idx] = (eval(&plus) - eval(&minus)) / (2.0 * step);
            }
            let diff = (&fd - &analytic[i]).mapv(|x| x * x).sum().sqrt();
            let norm = fd.mapv(|x: f64| x * x).sum().sqrt().max(
                analytic[i].mapv(|x| x * x).sum().sqrt(),
            );
            let rel = if norm < 1e-12 { diff } else { diff / norm };
            worst = worst.max(rel);
        }
        worst
    }

    /// Like `finite_diff_check` but only perturbs the listed coordinates of
    /// each input (for expensive models); compares per-coordinate.
    pub fn finite_diff_check_sampled(
        inputs: &[ArrayD<f64>],
        coords: &[Vec<usize>],
        step: f64,
        f: impl Fn(&Graph, &[Tensor]) -> Tensor,
    ) -> f64 {
        let g = Graph::new();
        let leaves: Vec<Tensor> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
        let loss = f(&g, &leaves);
        let grads = g.backward(&loss);
        let analytic: Vec<ArrayD<f64>> = leaves.iter().map(|t| grads.get(t)).collect();

        let eval = |xs: &[ArrayD<f64>]| -> f64 {
            let g = Graph::new_no_grad();
            let leaves: Vec<Tensor> = xs.iter().map(|x| g.leaf(x.clone())).collect();
            f(&g, &leaves).scalar()
        };

        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (i, input) in inputs.iter().enumerate() {
            let _ = input;
            for &idx in &coords[i] {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[i].as_slice_mut().unwrap()[idx] += step;
                minus[i].as_slice_mut().unwrap()[idx] -= step;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let an = analytic[i].as_slice().unwrap()[idx];
                num += (fd - an) * (fd - an);
                let m = fd.abs().max(an.abs());
                den += m * m;
            }
        }
        let den = den.sqrt();
        if den < 1e-12 {
            num.sqrt()
        } else {
            num.sqrt() / den
        }
    }
}
