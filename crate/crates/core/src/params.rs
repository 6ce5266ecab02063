//! Named parameter storage.
//!
//! All model weights and buffers live in one flat, insertion-ordered store.
//! Layers keep [`ParamId`] handles; checkpoints, the optimizer, freeze
//! contracts and cross-modality transfers all work over the same names.

use crate::error::{CoreError, Result};
use crate::tensor::{Element, Graph, Tensor, Var};
use std::collections::HashMap;

/// Stable handle to an entry in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable weight (unless frozen).
    Weight,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
struct Entry<E: Element> {
    name: String,
    tensor: Tensor<E>,
    kind: ParamKind,
    frozen: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<E: Element> {
    entries: Vec<Entry<E>>,
    by_name: HashMap<String, usize>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    fn insert(&mut self, name: String, tensor: Tensor<E>, kind: ParamKind) -> Result<ParamId> {
        if self.by_name.contains_key(&name) {
            return Err(CoreError::DuplicateParam { name });
        }
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            tensor,
            kind,
            frozen: false,
        });
        Ok(ParamId(id))
    }

    pub fn add_weight(&mut self, name: impl Into<String>, tensor: Tensor<E>) -> Result<ParamId> {
        self.insert(name.into(), tensor, ParamKind::Weight)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<E>) -> Result<ParamId> {
        self.insert(name.into(), tensor, ParamKind::Buffer)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn id_of(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| CoreError::UnknownParam {
                name: name.to_string(),
            })
    }

    /// A weight participates in optimization unless frozen.
    pub fn is_trainable(&self, id: ParamId) -> bool {
        let e = &self.entries[id.0];
        e.kind == ParamKind::Weight && !e.frozen
    }

    /// Freeze or unfreeze every weight whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for e in &mut self.entries {
            if e.kind == ParamKind::Weight && e.name.starts_with(prefix) {
                e.frozen = frozen;
            }
        }
    }

    pub fn set_all_frozen(&mut self, frozen: bool) {
        for e in &mut self.entries {
            if e.kind == ParamKind::Weight {
                e.frozen = frozen;
            }
        }
    }

    /// Ids in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Ids of weights in insertion order.
    pub fn weight_ids(&self) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.kind(id) == ParamKind::Weight)
            .collect()
    }

    /// Names and tensors in insertion order (the checkpoint layout).
    pub fn iter_named(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    /// Overwrite an entry's values, keeping the shape. Used by checkpoint
    /// loading and weight transfers.
    pub fn set_values(&mut self, id: ParamId, data: &[E]) -> Result<()> {
        let t = &mut self.entries[id.0].tensor;
        if t.numel() != data.len() {
            return Err(CoreError::InvalidShape {
                shape_len: t.numel(),
                data_len: data.len(),
            });
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    /// Copy values of every entry from `src` whose name matches after
    /// swapping `src_prefix` for `dst_prefix`. Shapes must agree.
    pub fn copy_values_from(
        &mut self,
        src: &ParamStore<E>,
        src_prefix: &str,
        dst_prefix: &str,
    ) -> Result<usize> {
        let mut copied = 0;
        for i in 0..self.entries.len() {
            let name = self.entries[i].name.clone();
            if let Some(rest) = name.strip_prefix(dst_prefix) {
                let src_name = format!("{src_prefix}{rest}");
                if let Ok(src_id) = src.id_of(&src_name) {
                    let data = src.get(src_id).data().to_vec();
                    if self.entries[i].tensor.shape() != src.get(src_id).shape() {
                        return Err(CoreError::ShapeMismatch {
                            op: "copy_values_from",
                            left: self.entries[i].tensor.shape().to_vec(),
                            right: src.get(src_id).shape().to_vec(),
                        });
                    }
                    self.entries[i].tensor.data_mut().copy_from_slice(&data);
                    copied += 1;
                }
            }
        }
        Ok(copied)
    }

    /// Copy values between entries of the same store whose names match after
    /// swapping prefixes. Entries whose shapes disagree are reported.
    pub fn copy_within(&mut self, src_prefix: &str, dst_prefix: &str, skip: &[&str]) -> Result<usize> {
        let mut copied = 0;
        for i in 0..self.entries.len() {
            let name = self.entries[i].name.clone();
            let Some(suffix) = name.strip_prefix(dst_prefix) else {
                continue;
            };
            if skip.contains(&suffix) {
                continue;
            }
            let src_name = format!("{src_prefix}{suffix}");
            let src_id = self.id_of(&src_name)?;
            if self.get(src_id).shape() != self.entries[i].tensor.shape() {
                return Err(CoreError::ShapeMismatch {
                    op: "copy_within",
                    left: self.get(src_id).shape().to_vec(),
                    right: self.entries[i].tensor.shape().to_vec(),
                });
            }
            let data = self.get(src_id).data().to_vec();
            self.entries[i].tensor.data_mut().copy_from_slice(&data);
            copied += 1;
        }
        Ok(copied)
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.clear_grad();
        }
    }
}

/// Everything a module forward needs: the graph being recorded, the store
/// (mutable, batch-norm running stats update in place) and the binding that
/// maps parameters to graph leaves.
pub struct Fwd<'a, E: Element> {
    pub g: &'a mut Graph<E>,
    pub store: &'a mut ParamStore<E>,
    pub bind: &'a mut ParamBinding,
}

impl<'a, E: Element> Fwd<'a, E> {
    pub fn new(
        g: &'a mut Graph<E>,
        store: &'a mut ParamStore<E>,
        bind: &'a mut ParamBinding,
    ) -> Self {
        Self { g, store, bind }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.bind.bind(self.g, self.store, id)
    }
}

/// Tracks which store entries were bound into a graph, so gradients can be
/// harvested back after a backward pass.
///
/// Binding is cached: a parameter used twice in one forward maps to a single
/// leaf and its gradient contributions accumulate on that leaf.
#[derive(Debug, Default)]
pub struct ParamBinding {
    bound: Vec<(ParamId, Var)>,
    cache: HashMap<ParamId, Var>,
}

impl ParamBinding {
    pub fn new() -> Self {
        Self::default()
    }

    /// Binding that reuses externally created leaves (gradient checking
    /// drives model forwards through this).
    pub fn prebound(ids: &[ParamId], vars: &[Var]) -> Self {
        assert_eq!(ids.len(), vars.len());
        let mut b = Self::default();
        for (&id, &v) in ids.iter().zip(vars) {
            b.cache.insert(id, v);
            b.bound.push((id, v));
        }
        b
    }

    pub fn bind<E: Element>(
        &mut self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        id: ParamId,
    ) -> Var {
        if let Some(&v) = self.cache.get(&id) {
            return v;
        }
        let mut t = store.get(id).clone();
        t.requires_grad = store.is_trainable(id);
        t.grad = None;
        let v = g.leaf(t);
        self.cache.insert(id, v);
        self.bound.push((id, v));
        v
    }

    /// Accumulate graph gradients into the store's grad slots.
    pub fn harvest<E: Element>(&self, g: &Graph<E>, store: &mut ParamStore<E>) {
        for &(id, var) in &self.bound {
            if let Some(grad) = g.grad(var) {
                let grad = grad.to_vec();
                store.get_mut(id).accumulate_grad(&grad);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut store = ParamStore::<f32>::new();
        store.add_weight("w", Tensor::zeros(&[2])).unwrap();
        assert!(store.add_weight("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn freeze_by_prefix() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add_weight("spatial.stem.w", Tensor::zeros(&[2])).unwrap();
        let b = store.add_weight("ttn.head.w", Tensor::zeros(&[2])).unwrap();
        let buf = store
            .add_buffer("spatial.bn.running_mean", Tensor::zeros(&[2]))
            .unwrap();
        store.set_frozen_prefix("spatial.", true);
        assert!(!store.is_trainable(a));
        assert!(store.is_trainable(b));
        assert!(!store.is_trainable(buf));
    }

    #[test]
    fn binding_caches_and_harvests() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add_weight("w", Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let mut g = Graph::new(0);
        let mut binding = ParamBinding::new();
        let v1 = binding.bind(&mut g, &store, id);
        let v2 = binding.bind(&mut g, &store, id);
        assert_eq!(v1, v2);
        // loss = sum(w) + sum(w) -> grad 2 per element
        let s1 = g.sum(v1);
        let s2 = g.sum(v2);
        let loss = g.add(s1, s2).unwrap();
        g.backward(loss).unwrap();
        binding.harvest(&g, &mut store);
        assert_eq!(store.get(id).grad.as_deref(), Some(&[2.0, 2.0][..]));
    }
}
