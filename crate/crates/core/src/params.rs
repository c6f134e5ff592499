//! Named parameter storage, graph binding, and the AdamW optimizer.

use crate::error::{DecalError, Result};
use crate::tensor::{Arr, Grads, Graph, Var};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// All model weights, keyed by dotted path ("unet.down0.res.conv1.w", ...).
#[derive(Clone, Default)]
pub struct ParamStore {
    map: IndexMap<String, Arr>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Arr) {
        self.map.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Arr> {
        self.map
            .get(name)
            .ok_or_else(|| DecalError::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Arr> {
        self.map
            .get_mut(name)
            .ok_or_else(|| DecalError::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Arr> {
        self.map.shift_remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arr)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Names sorted lexicographically (serialization order).
    pub fn sorted_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.map.keys().cloned().collect();
        v.sort();
        v
    }
}

/// Tracks which store parameters were bound into a graph, deduplicating
/// by name so a parameter used twice shares one leaf (gradient accumulates).
/// With a trainable filter, parameters outside the set bind as constants:
/// no gradients are computed for them and none can be applied.
pub struct Binder<'a> {
    pub graph: &'a mut Graph,
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
    trainable: Option<&'a std::collections::BTreeSet<String>>,
}

impl<'a> Binder<'a> {
    pub fn new(graph: &'a mut Graph, store: &'a ParamStore) -> Self {
        Binder { graph, store, bound: BTreeMap::new(), trainable: None }
    }

    pub fn with_trainable(mut self, set: &'a std::collections::BTreeSet<String>) -> Self {
        self.trainable = Some(set);
        self
    }

    pub fn bind(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|_| panic!("parameter not found: {name}"))
            .clone();
        let grad = self.trainable.map_or(true, |t| t.contains(name));
        let v = if grad { self.graph.leaf(value) } else { self.graph.constant(value) };
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Release the graph borrow, keeping the name -> leaf map.
    pub fn into_bound(self) -> BTreeMap<String, Var> {
        self.bound
    }
}

/// Pull gradients for every bound parameter.
pub fn collect_named_grads(bound: &BTreeMap<String, Var>, grads: &mut Grads) -> BTreeMap<String, Arr> {
    let mut out = BTreeMap::new();
    for (name, &var) in bound {
        if let Some(g) = grads.take(var) {
            out.insert(name.clone(), g);
        }
    }
    out
}

/// Weight initialization helpers. All draws come from the passed stream in
/// construction order, which makes initialization a pure function of the seed.
pub fn init_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Arr {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let x: f64 = rng.sample(rand_distr::StandardNormal);
            x * std
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

pub fn init_zeros(shape: &[usize]) -> Arr {
    ArrayD::zeros(IxDyn(shape))
}

pub fn init_ones(shape: &[usize]) -> Arr {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

/// Fan-in scaled normal init for conv / linear weights.
pub fn init_fan_in(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
    init_normal(rng, shape, (1.0 / fan_in as f64).sqrt())
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW with decoupled weight decay. State is kept per parameter name.
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Arr>,
    v: BTreeMap<String, Arr>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update to the named parameters. Iteration order is the
    /// sorted order of `grads`, so updates are deterministic.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Arr>) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *m).and(g).for_each(|mm, &gg| {
                *mm = c.beta1 * *mm + (1.0 - c.beta1) * gg;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vv, &gg| {
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gg * gg;
            });
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|pp, &mm, &vv| {
                    let mhat = mm / bc1;
                    let vhat = vv / bc2;
                    *pp -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *pp);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn adamw_moves_toward_minimum() {
        // minimize (p - 3)^2 elementwise
        let mut store = ParamStore::new();
        store.insert("p", ArrayD::from_elem(IxDyn(&[4]), 0.0));
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() });
        for _ in 0..500 {
            let p = store.get("p").unwrap().clone();
            let g = p.mapv(|x| 2.0 * (x - 3.0));
            let mut grads = BTreeMap::new();
            grads.insert("p".to_string(), g);
            opt.step(&mut store, &grads).unwrap();
        }
        let p = store.get("p").unwrap();
        for &x in p.iter() {
            assert!((x - 3.0).abs() < 0.1, "got {x}");
        }
    }

    #[test]
    fn binder_dedups_params() {
        let mut store = ParamStore::new();
        let mut rng = stream(0, "init");
        store.insert("w", init_fan_in(&mut rng, &[3, 3]));
        let mut g = Graph::new();
        let mut b = Binder::new(&mut g, &store);
        let v1 = b.bind("w");
        let v2 = b.bind("w");
        assert_eq!(v1, v2);
    }
}
