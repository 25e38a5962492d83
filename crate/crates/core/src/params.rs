//! Named parameter storage.
//!
//! Every tensor is initialized from a ChaCha stream keyed by
//! `sha256(seed, name)`, so a tensor's initial value depends only on the
//! global seed and its own name, never on what else the model allocates.
//! Two configurations that share a parameter name therefore share its
//! initial value exactly, which is what makes ablation reductions bitwise
//! comparable.
//!
//! Trainability has two layers: tensors frozen at construction (template
//! tokens) never train, and a partition applied on top selects which of the
//! remaining tensors the optimizer may touch.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ParamStore<S> {
    tensors: IndexMap<String, Tensor<S>>,
    /// Frozen at construction; partitions cannot re-enable these.
    intrinsic_frozen: BTreeSet<String>,
    /// Names the current partition excludes from training.
    partition_frozen: BTreeSet<String>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            tensors: IndexMap::new(),
            intrinsic_frozen: BTreeSet::new(),
            partition_frozen: BTreeSet::new(),
        }
    }

    /// Deterministic per-tensor RNG stream.
    pub fn rng_for(seed: u64, name: &str) -> ChaCha12Rng {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(name.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha12Rng::from_seed(key)
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<S>) {
        assert!(
            self.tensors.insert(name.to_string(), tensor).is_none(),
            "parameter {name} inserted twice"
        );
    }

    pub fn init_normal(&mut self, seed: u64, name: &str, rows: usize, cols: usize, std: f64) {
        let mut rng = Self::rng_for(seed, name);
        let data: Vec<S> =
            (0..rows * cols).map(|_| S::of_f64(std_normal(&mut rng) * std)).collect();
        self.insert(name, Tensor::from_vec(rows, cols, data));
    }

    pub fn init_uniform(&mut self, seed: u64, name: &str, rows: usize, cols: usize, bound: f64) {
        let mut rng = Self::rng_for(seed, name);
        let data: Vec<S> =
            (0..rows * cols).map(|_| S::of_f64(rng.gen_range(-bound..bound))).collect();
        self.insert(name, Tensor::from_vec(rows, cols, data));
    }

    pub fn init_const(&mut self, name: &str, rows: usize, cols: usize, value: f64) {
        self.insert(name, Tensor::from_vec(rows, cols, vec![S::of_f64(value); rows * cols]));
    }

    /// Marks a tensor as never trainable (template tokens).
    pub fn freeze_intrinsic(&mut self, name: &str) {
        assert!(self.tensors.contains_key(name), "freezing unknown parameter {name}");
        self.intrinsic_frozen.insert(name.to_string());
    }

    /// Applies a training partition: `trainable` decides for every
    /// non-intrinsic tensor whether the optimizer may update it.
    pub fn set_partition(&mut self, trainable: impl Fn(&str) -> bool) {
        self.partition_frozen = self
            .tensors
            .keys()
            .filter(|n| !trainable(n))
            .cloned()
            .collect();
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
            && !self.intrinsic_frozen.contains(name)
            && !self.partition_frozen.contains(name)
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        self.tensors.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<S> {
        self.tensors.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Insertion-ordered parameter names.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors.keys().filter(|n| self.is_trainable(n)).cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Binds a parameter into a graph as a named leaf, trainable per the
    /// current partition.
    pub fn bind(&self, graph: &mut Graph<S>, name: &str) -> Var {
        graph.named_leaf(name, self.get(name).clone(), self.is_trainable(name))
    }

    /// Casts every tensor to another element type, keeping freeze state.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.map(|x| T::of_f64(x.as_f64()))))
                .collect(),
            intrinsic_frozen: self.intrinsic_frozen.clone(),
            partition_frozen: self.partition_frozen.clone(),
        }
    }
}

/// Standard normal via Box-Muller over the ChaCha stream.
fn std_normal(rng: &mut ChaCha12Rng) -> f64 {
    loop {
        let u1: f64 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let u2: f64 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        if u1 > 0.0 {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}
