use std::collections::HashMap;
use std::path::Path;

use crate::checkpoint;
use crate::error::{Result, TensorError};
use crate::ops::norm::{BatchStats, Mode};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Saved state that is not optimised (batch-norm running statistics).
    Buffer,
}

/// Named model state, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    kinds: Vec<ParamKind>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.kinds.push(kind);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids()
            .filter(|&id| self.kind(id) == ParamKind::Trainable)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).numel()).sum()
    }

    pub fn apply_batch_stats(&mut self, updates: &[BnUpdate], momentum: f64) {
        for u in updates {
            let mut mean =
                std::mem::replace(&mut self.values[u.running_mean.0], Tensor::scalar(0.0));
            let var = &mut self.values[u.running_var.0];
            u.stats
                .update_running(mean.data_mut(), var.data_mut(), momentum);
            self.values[u.running_mean.0] = mean;
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let records: Vec<(&str, &Tensor)> = self
            .names
            .iter()
            .map(String::as_str)
            .zip(&self.values)
            .collect();
        checkpoint::save(path, &records)
    }

    /// Overwrite every registered tensor from a checkpoint. Missing or
    /// mis-shaped entries are errors; extra entries are ignored.
    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let records: HashMap<String, Tensor> = checkpoint::load(path)?.into_iter().collect();
        for (i, name) in self.names.iter().enumerate() {
            let t = records
                .get(name)
                .ok_or_else(|| TensorError::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != self.values[i].shape() {
                return Err(TensorError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = t.clone();
        }
        Ok(())
    }
}

/// A pending running-statistics update produced by a training forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats,
}

/// A tape bound to a read-only parameter store for one forward/backward pass.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    bn_updates: Vec<BnUpdate>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore, mode: Mode, track_grads: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            mode,
            track_grads,
            bn_updates: Vec::new(),
        }
    }

    /// Continue recording on an existing tape.
    pub fn from_tape(tape: Tape, params: &'p ParamStore, mode: Mode, track_grads: bool) -> Self {
        Self {
            tape,
            params,
            bound: vec![None; params.len()],
            mode,
            track_grads,
            bn_updates: Vec::new(),
        }
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    /// Use `v` in place of the stored value of parameter `id`.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Tape leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let trainable = self.params.kind(id) == ParamKind::Trainable;
        let v = self
            .tape
            .leaf(self.params.get(id).clone(), trainable && self.track_grads);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn push_bn_update(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Gradients of every bound trainable parameter after `tape.backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let g = self.tape.grad((*v)?)?;
                Some((ParamId(i), g.clone()))
            })
            .collect()
    }
}
