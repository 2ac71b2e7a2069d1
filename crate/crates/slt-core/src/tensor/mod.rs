//! Reverse-mode autodiff over `ndarray` arrays.
//!
//! A [`Graph`] is a tape of f64 arrays built define-by-run. Operations append
//! nodes with a backward closure; [`Graph::backward`] walks the tape in
//! reverse and accumulates parameter gradients into a [`ParamStore`].
//!
//! All math is f64. The engine is small on purpose: only the operations the
//! model stack and losses need, each with a finite-difference test.

mod conv;
mod loss;
mod ops;

pub mod gradcheck;

pub use loss::{CtcTarget, LossError};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

/// Handle to a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

/// Handle to a parameter in a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Hash)]
pub struct ParamId(pub(crate) usize);

/// The fixed set of checkpointable parameter groups.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    VisualBackbone,
    TemporalBlock,
    VisualTransformer,
    TextEncoder,
    DecoderShallow,
    DecoderDeep,
    ProjVisual,
    ProjText,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::VisualBackbone,
        ParamGroup::TemporalBlock,
        ParamGroup::VisualTransformer,
        ParamGroup::TextEncoder,
        ParamGroup::DecoderShallow,
        ParamGroup::DecoderDeep,
        ParamGroup::ProjVisual,
        ParamGroup::ProjText,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ParamGroup::VisualBackbone => "visual_backbone",
            ParamGroup::TemporalBlock => "temporal_block",
            ParamGroup::VisualTransformer => "visual_transformer",
            ParamGroup::TextEncoder => "text_encoder",
            ParamGroup::DecoderShallow => "decoder_shallow",
            ParamGroup::DecoderDeep => "decoder_deep",
            ParamGroup::ProjVisual => "proj_visual",
            ParamGroup::ProjText => "proj_text",
        }
    }

    pub fn parse(s: &str) -> Option<ParamGroup> {
        ParamGroup::ALL.into_iter().find(|g| g.as_str() == s)
    }

    /// The three groups making up the visual encoder.
    pub fn visual() -> Vec<ParamGroup> {
        vec![
            ParamGroup::VisualBackbone,
            ParamGroup::TemporalBlock,
            ParamGroup::VisualTransformer,
        ]
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One model parameter (or non-trainable buffer, e.g. batch-norm running stats).
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub trainable: bool,
    pub frozen: bool,
}

/// Named, grouped parameter storage shared across training steps.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        value: ArrayD<f64>,
        trainable: bool,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let grad = ArrayD::zeros(value.raw_dim());
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Param {
            name,
            group,
            value,
            grad,
            trainable,
            frozen: false,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.entries[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.fill(0.0);
        }
    }

    pub fn set_frozen_groups(&mut self, groups: &[ParamGroup]) {
        for p in &mut self.entries {
            p.frozen = groups.contains(&p.group);
        }
    }

    pub fn group_param_count(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|p| p.group == group && p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Deep copy of every value in a group; used for freeze/transfer checks.
    pub fn snapshot_group(&self, group: ParamGroup) -> Vec<(String, ArrayD<f64>)> {
        self.entries
            .iter()
            .filter(|p| p.group == group)
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    fn accumulate(&mut self, id: ParamId, grad: &ArrayD<f64>) {
        let p = &mut self.entries[id.0];
        if p.trainable && !p.frozen {
            p.grad += grad;
        }
    }
}

type BackFn = Box<dyn Fn(&Graph, &ArrayD<f64>, &mut GradBuf)>;

struct Node {
    value: ArrayD<f64>,
    back: Option<BackFn>,
}

/// Per-backward-pass gradient accumulator, indexed by node.
pub struct GradBuf {
    slots: Vec<Option<ArrayD<f64>>>,
}

impl GradBuf {
    pub fn add(&mut self, id: NodeId, contrib: ArrayD<f64>) {
        match &mut self.slots[id.0] {
            Some(acc) => *acc += &contrib,
            slot @ None => *slot = Some(contrib),
        }
    }
}

/// The autodiff tape. Rebuilt every step; parameters live in [`ParamStore`].
pub struct Graph {
    nodes: Vec<Node>,
    param_of: Vec<Option<ParamId>>,
    leaf_cache: BTreeMap<ParamId, NodeId>,
    pub train: bool,
}

impl Graph {
    pub fn new(train: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            param_of: Vec::new(),
            leaf_cache: BTreeMap::new(),
            train,
        }
    }

    pub(crate) fn push(&mut self, value: ArrayD<f64>, back: Option<BackFn>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, back });
        self.param_of.push(None);
        id
    }

    /// Insert a value with no gradient.
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, None)
    }

    /// Leaf node for a parameter, cached so repeated lookups share one node.
    pub fn leaf(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.leaf_cache.get(&id) {
            return n;
        }
        let n = self.push(store.value(id).clone(), None);
        self.param_of[n.0] = Some(id);
        self.leaf_cache.insert(id, n);
        n
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert!(v.len() == 1, "expected scalar node, got shape {:?}", v.shape());
        v.iter().next().copied().unwrap()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse pass from a scalar `root`, accumulating into `store` grads.
    pub fn backward(&self, root: NodeId, store: &mut ParamStore) {
        let root_val = self.value(root);
        assert!(
            root_val.len() == 1,
            "backward root must be scalar, got shape {:?}",
            root_val.shape()
        );
        let mut buf = GradBuf {
            slots: vec![None; self.nodes.len()],
        };
        buf.slots[root.0] = Some(ArrayD::ones(root_val.raw_dim()));
        for idx in (0..=root.0).rev() {
            let Some(grad) = buf.slots[idx].take() else {
                continue;
            };
            debug_assert_eq!(
                grad.shape(),
                self.nodes[idx].value.shape(),
                "gradient shape mismatch at node {idx}"
            );
            if let Some(back) = &self.nodes[idx].back {
                back(self, &grad, &mut buf);
            }
            if let Some(pid) = self.param_of[idx] {
                store.accumulate(pid, &grad);
            }
        }
    }
}

/// Forward-pass context: tape, parameters, mode and the rng feeding
/// dropout/masking decisions.
pub struct Fwd<'a> {
    pub g: Graph,
    pub store: &'a mut ParamStore,
    pub rng: rand_chacha::ChaCha8Rng,
}

impl<'a> Fwd<'a> {
    pub fn new(store: &'a mut ParamStore, train: bool, rng: rand_chacha::ChaCha8Rng) -> Self {
        Fwd {
            g: Graph::new(train),
            store,
            rng,
        }
    }

    /// Leaf node for a parameter.
    pub fn p(&mut self, id: ParamId) -> NodeId {
        self.g.leaf(self.store, id)
    }

    pub fn train(&self) -> bool {
        self.g.train
    }
}

pub(crate) fn dyn_shape(shape: &[usize]) -> IxDyn {
    IxDyn(shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn param_store_roundtrip() {
        let mut store = ParamStore::new();
        let id = store.add(
            "enc/w",
            ParamGroup::TextEncoder,
            arr1(&[1.0, 2.0]).into_dyn(),
            true,
        );
        assert_eq!(store.lookup("enc/w"), Some(id));
        assert_eq!(store.get(id).group, ParamGroup::TextEncoder);
        assert_eq!(store.group_param_count(ParamGroup::TextEncoder), 2);
        assert_eq!(store.group_param_count(ParamGroup::DecoderDeep), 0);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_name_rejected() {
        let mut store = ParamStore::new();
        store.add("w", ParamGroup::ProjText, arr1(&[0.0]).into_dyn(), true);
        store.add("w", ParamGroup::ProjText, arr1(&[0.0]).into_dyn(), true);
    }

    #[test]
    fn group_names_roundtrip() {
        for g in ParamGroup::ALL {
            assert_eq!(ParamGroup::parse(g.as_str()), Some(g));
        }
        assert_eq!(ParamGroup::parse("bogus"), None);
    }

    #[test]
    fn frozen_params_receive_no_grad() {
        let mut store = ParamStore::new();
        let id = store.add(
            "w",
            ParamGroup::ProjVisual,
            arr1(&[3.0, 4.0]).into_dyn(),
            true,
        );
        store.set_frozen_groups(&[ParamGroup::ProjVisual]);
        let mut g = Graph::new(true);
        let w = g.leaf(&store, id);
        let loss = g.sum_all(w);
        g.backward(loss, &mut store);
        assert_eq!(store.get(id).grad, ArrayD::<f64>::zeros(IxDyn(&[2])));
    }
}
