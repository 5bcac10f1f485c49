//! Named parameter sets shared by all modules.
//!
//! Parameters live outside any graph as named f64 arrays. Each training step
//! inserts them as leaves into a fresh `Graph` and reads gradients back by
//! name. Names are sorted (BTreeMap) so checksums and checkpoints are stable.

use std::collections::BTreeMap;

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::tape::{Arr, Graph, Id};

#[derive(Clone, Debug, Default)]
pub struct Params(pub BTreeMap<String, Arr>);

/// Leaf ids for one `Params` set inside a graph.
#[derive(Clone, Debug, Default)]
pub struct ParamNodes(pub BTreeMap<String, Id>);

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Arr {
    Arr::from_shape_fn(IxDyn(shape), |_| {
        let u1: f64 = rng.gen_range(1e-12..1.0f64);
        let u2: f64 = rng.gen();
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

/// He-style init for a conv kernel `[out, in, kh, kw]` or linear `[in, out]`.
pub fn he_init(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
    let fan_in: usize = match shape.len() {
        2 => shape[0],
        4 => shape[1] * shape[2] * shape[3],
        _ => shape.iter().product::<usize>() / shape[0].max(1),
    };
    randn(rng, shape, (2.0 / fan_in as f64).sqrt())
}

impl Params {
    pub fn new() -> Self {
        Self(BTreeMap::new())
    }

    pub fn insert(&mut self, name: &str, value: Arr) {
        self.0.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &Arr {
        self.0
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn num_scalars(&self) -> usize {
        self.0.values().map(|a| a.len()).sum()
    }

    /// Insert every array as a graph leaf, returning the ids by name.
    pub fn nodes(&self, g: &mut Graph) -> ParamNodes {
        let mut out = BTreeMap::new();
        for (k, v) in &self.0 {
            out.insert(k.clone(), g.leaf(v.clone()));
        }
        ParamNodes(out)
    }

    /// Same as `nodes` but the leaves are later ignored by optimizers; there
    /// is no structural difference, frozen-ness is a property of the training
    /// loop, which simply never applies updates to these names.
    pub fn frozen_nodes(&self, g: &mut Graph) -> ParamNodes {
        self.nodes(g)
    }

    /// SHA-256 over the f32 little-endian serialization in name order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.0 {
            h.update(k.as_bytes());
            for &x in v.iter() {
                h.update((x as f32).to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Largest elementwise absolute difference against another set.
    pub fn max_abs_diff(&self, other: &Params) -> f64 {
        let mut m: f64 = 0.0;
        for (k, v) in &self.0 {
            let o = other.get(k);
            for (a, b) in v.iter().zip(o.iter()) {
                m = m.max((a - b).abs());
            }
        }
        m
    }
}

impl ParamNodes {
    pub fn id(&self, name: &str) -> Id {
        *self
            .0
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter node {name}"))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Collect gradients for one parameter set out of a finished backward pass.
pub fn grads_by_name(
    params: &Params,
    nodes: &ParamNodes,
    grads: &[Option<Arr>],
) -> BTreeMap<String, Arr> {
    let mut out = BTreeMap::new();
    for (name, arr) in &params.0 {
        let id = nodes.id(name);
        let g = grads[id.0]
            .clone()
            .unwrap_or_else(|| Arr::zeros(arr.raw_dim()));
        out.insert(name.clone(), g);
    }
    out
}
