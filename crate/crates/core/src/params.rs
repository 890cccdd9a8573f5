//! Named parameter storage, graph binding, and the AdamW optimizer.
//!
//! Parameters live in a [`ParamSet`] keyed by path-style names
//! (`"opt.stem.conv.w"`). A forward pass binds the arrays it touches as leaf
//! tensors through a [`Binding`]; after `backward` the binding maps node
//! gradients back to parameter names.

use crate::tensor::{Gradients, Graph, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::cell::RefCell;
use std::collections::BTreeMap;

/// Ordered map of named parameter arrays.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    map: BTreeMap<String, ArrayD<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            self.map.insert(name.to_string(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn set(&mut self, name: &str, value: ArrayD<f64>) {
        let slot = self.get_mut(name);
        assert_eq!(slot.shape(), value.shape(), "shape change for {name}");
        *slot = value;
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }

    /// Deterministic content hash; used to assert evaluation does not touch
    /// weights.
    pub fn content_hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut mix = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (k, v) in &self.map {
            for b in k.as_bytes() {
                mix(*b);
            }
            for x in v.iter() {
                for b in x.to_le_bytes() {
                    mix(b);
                }
            }
        }
        h
    }
}

/// Binds parameters into a graph as leaves, at most once per name.
pub struct Binding<'p> {
    graph: Graph,
    params: &'p ParamSet,
    bound: RefCell<BTreeMap<String, Tensor>>,
}

impl<'p> Binding<'p> {
    pub fn new(graph: &Graph, params: &'p ParamSet) -> Self {
        Binding {
            graph: graph.clone(),
            params,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn graph(&self) -> Graph {
        self.graph.clone()
    }

    /// Leaf tensor for parameter `name`.
    pub fn get(&self, name: &str) -> Tensor {
        if let Some(t) = self.bound.borrow().get(name) {
            return t.clone();
        }
        let t = self.graph.leaf(self.params.get(name).clone());
        self.bound.borrow_mut().insert(name.to_string(), t.clone());
        t
    }

    /// Collect parameter gradients after a backward pass.
    pub fn collect_grads(&self, grads: &Gradients) -> BTreeMap<String, ArrayD<f64>> {
        self.bound
            .borrow()
            .iter()
            .map(|(k, t)| (k.clone(), grads.get(t)))
            .collect()
    }
}

/// Accumulate `incr` into `acc` elementwise, inserting missing entries.
pub fn add_grads(acc: &mut BTreeMap<String, ArrayD<f64>>, incr: &BTreeMap<String, ArrayD<f64>>) {
    for (k, v) in incr {
        match acc.get_mut(k) {
            Some(a) => *a += v,
            None => {
                acc.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    pub m: BTreeMap<String, ArrayD<f64>>,
    pub v: BTreeMap<String, ArrayD<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, ArrayD<f64>>) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mh = m / bc1;
                    let vh = v / bc2;
                    *p -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *p);
                });
        }
    }
}

// ---- initializers ----

/// Uniform Kaiming-style init with gain 1/sqrt(fan_in).
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha12Rng) -> ArrayD<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound))
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

/// Convolution weight (Cout, Cin_g, kh, kw) with fan_in = Cin_g*kh*kw.
pub fn init_conv(
    cout: usize,
    cin_g: usize,
    kh: usize,
    kw: usize,
    rng: &mut ChaCha12Rng,
) -> ArrayD<f64> {
    init_uniform(&[cout, cin_g, kh, kw], cin_g * kh * kw, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adamw_moves_params_and_lr_zero_freezes() {
        let mut ps = ParamSet::new();
        ps.insert("w", ones(&[3]));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), ones(&[3]));

        let before = ps.get("w").clone();
        let mut opt = AdamW::new(0.0, 0.0);
        opt.step(&mut ps, &g);
        assert_eq!(ps.get("w"), &before, "lr 0 must leave params bit-identical");

        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut ps, &g);
        assert!(ps.get("w").iter().all(|&x| x < 1.0));
    }

    #[test]
    fn binding_binds_once() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        ps.insert("a", init_uniform(&[2, 2], 2, &mut rng));
        let g = crate::tensor::Graph::new();
        let b = Binding::new(&g, &ps);
        let t1 = b.get("a");
        let t2 = b.get("a");
        assert_eq!(t1.id(), t2.id());
    }

    #[test]
    fn content_hash_sensitive_to_values() {
        let mut ps = ParamSet::new();
        ps.insert("w", ones(&[4]));
        let h1 = ps.content_hash();
        ps.get_mut("w")[0] = 2.0;
        assert_ne!(h1, ps.content_hash());
    }
}
