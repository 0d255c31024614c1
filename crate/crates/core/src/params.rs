//! Named parameter collections, bound into a fresh graph every step.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{el, Element, Graph, TensorData, TensorId};

/// Index of a parameter within its [`ParamSet`]; stable across steps and
/// the unit of checkpoint ordering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Bucket a parameter is tallied under, mirroring how the published table
/// splits counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamBucket {
    /// Attention, FFN, and norm weights.
    NonEmbedding,
    /// Router matrices, reported separately.
    Router,
    /// Token/position embeddings and the untied output head.
    Embedding,
}

pub struct Param<T> {
    pub name: String,
    pub bucket: ParamBucket,
    pub value: TensorData<T>,
}

/// The full set of learned tensors for one model, in declaration order.
pub struct ParamSet<T> {
    entries: Vec<Param<T>>,
}

impl<T: Element> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        bucket: ParamBucket,
        value: TensorData<T>,
    ) -> ParamId {
        self.entries.push(Param {
            name: name.into(),
            bucket,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Adds a parameter initialized from `N(0, std^2)`.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        bucket: ParamBucket,
        shape: Vec<usize>,
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let normal = Normal::new(0.0f64, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n).map(|_| el(normal.sample(rng))).collect();
        self.add(name, bucket, TensorData::new(shape, data).expect("shape"))
    }

    /// Adds a parameter filled with a constant (e.g. norm gains at 1).
    pub fn add_filled(
        &mut self,
        name: impl Into<String>,
        bucket: ParamBucket,
        shape: Vec<usize>,
        fill: f64,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = vec![el::<T>(fill); n];
        self.add(name, bucket, TensorData::new(shape, data).expect("shape"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.entries
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    /// Total element count per bucket: (non-embedding, router, embedding).
    pub fn bucket_tally(&self) -> (u64, u64, u64) {
        let mut t = (0u64, 0u64, 0u64);
        for p in &self.entries {
            let n = p.value.numel() as u64;
            match p.bucket {
                ParamBucket::NonEmbedding => t.0 += n,
                ParamBucket::Router => t.1 += n,
                ParamBucket::Embedding => t.2 += n,
            }
        }
        t
    }

    /// Registers every parameter as a leaf on a fresh graph.
    pub fn bind(&self, graph: &mut Graph<T>) -> BoundParams {
        let ids = self
            .entries
            .iter()
            .map(|p| graph.leaf(p.value.clone(), true))
            .collect();
        BoundParams { ids }
    }

    /// Collects gradients after a backward pass, zeros for unreached params.
    pub fn collect_grads(&self, graph: &Graph<T>, bound: &BoundParams) -> Vec<Vec<T>> {
        self.entries
            .iter()
            .zip(&bound.ids)
            .map(|(p, &id)| {
                graph
                    .grad(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); p.value.numel()])
            })
            .collect()
    }
}

/// Graph handles for one binding of a [`ParamSet`].
pub struct BoundParams {
    ids: Vec<TensorId>,
}

impl BoundParams {
    pub fn id(&self, param: ParamId) -> TensorId {
        self.ids[param.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_init() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut set = ParamSet::<f32>::new();
            set.add_normal("w", ParamBucket::NonEmbedding, vec![4, 4], 0.02, &mut rng);
            set.get(ParamId(0)).value.data().to_vec()
        };
        let a = build();
        let b = build();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn bind_and_collect_grads() {
        let mut set = ParamSet::<f64>::new();
        let w = set.add_filled("w", ParamBucket::NonEmbedding, vec![2, 2], 1.5);
        let unused = set.add_filled("u", ParamBucket::Router, vec![3], 0.0);
        let mut g = Graph::new();
        let bound = set.bind(&mut g);
        let loss = g.sum_all(bound.id(w));
        g.backward(loss).unwrap();
        let grads = set.collect_grads(&g, &bound);
        assert_eq!(grads[w.0], vec![1.0; 4]);
        assert_eq!(grads[unused.0], vec![0.0; 3]);
        assert_eq!(set.bucket_tally(), (4, 3, 0));
    }
}
