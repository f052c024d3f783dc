//! Flat storage for trainable parameters.

use std::ops::Range;

/// Handle to a named block of parameters inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockId(pub(crate) u32);

#[derive(Debug, Clone)]
struct BlockInfo {
    name: String,
    range: Range<usize>,
}

/// All trainable values of a model, with their gradient accumulators.
///
/// Blocks are contiguous, disjoint, and cover the buffers exactly; the value
/// and gradient buffers always have equal length. Registration order is part
/// of a model's identity: optimizers and checkpoints address parameters by
/// block name and offset.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    values: Vec<f64>,
    grads: Vec<f64>,
    blocks: Vec<BlockInfo>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a named block. Panics on a duplicate name or an empty block:
    /// both indicate a model construction bug, not a runtime condition.
    pub fn register(&mut self, name: &str, values: Vec<f64>) -> BlockId {
        assert!(!values.is_empty(), "parameter block '{name}' is empty");
        assert!(
            self.block_id(name).is_none(),
            "duplicate parameter block '{name}'"
        );
        let start = self.values.len();
        self.values.extend_from_slice(&values);
        self.grads.resize(self.values.len(), 0.0);
        self.blocks.push(BlockInfo {
            name: name.to_string(),
            range: start..self.values.len(),
        });
        BlockId((self.blocks.len() - 1) as u32)
    }

    /// Total number of parameters.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block_id(&self, name: &str) -> Option<BlockId> {
        self.blocks
            .iter()
            .position(|b| b.name == name)
            .map(|i| BlockId(i as u32))
    }

    pub fn block_name(&self, id: BlockId) -> &str {
        &self.blocks[id.0 as usize].name
    }

    pub fn block_range(&self, id: BlockId) -> Range<usize> {
        self.blocks[id.0 as usize].range.clone()
    }

    pub fn block_len(&self, id: BlockId) -> usize {
        self.block_range(id).len()
    }

    pub fn block(&self, id: BlockId) -> &[f64] {
        &self.values[self.block_range(id)]
    }

    pub fn block_mut(&mut self, id: BlockId) -> &mut [f64] {
        let r = self.block_range(id);
        &mut self.values[r]
    }

    pub fn block_grad(&self, id: BlockId) -> &[f64] {
        &self.grads[self.block_range(id)]
    }

    /// Iterates `(id, name)` pairs in registration order.
    pub fn block_ids(&self) -> impl Iterator<Item = (BlockId, &str)> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (BlockId(i as u32), b.name.as_str()))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn zero_grads(&mut self) {
        self.grads.fill(0.0);
    }

    /// Splits into `(values, grads)` so the backward pass can read weights
    /// while accumulating into gradients.
    pub(crate) fn split_mut(&mut self) -> (&[f64], &mut [f64]) {
        (&self.values, &mut self.grads)
    }

    /// Splits into `(values, grads)` for the optimizer update.
    pub(crate) fn update_split(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.values, &mut self.grads)
    }

    /// Resolves the block containing flat index `i`, for error reporting.
    pub(crate) fn block_of_index(&self, i: usize) -> &str {
        self.blocks
            .iter()
            .find(|b| b.range.contains(&i))
            .map(|b| b.name.as_str())
            .unwrap_or("<none>")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_are_disjoint_and_cover_the_buffer() {
        let mut store = ParamStore::new();
        let a = store.register("a", vec![1.0, 2.0]);
        let b = store.register("b", vec![3.0; 5]);
        assert_eq!(store.len(), 7);
        assert_eq!(store.grads().len(), store.len());
        assert_eq!(store.block_range(a), 0..2);
        assert_eq!(store.block_range(b), 2..7);
        assert_eq!(store.block(b), &[3.0; 5]);
        assert_eq!(store.block_id("b"), Some(b));
        assert_eq!(store.block_id("c"), None);
        assert_eq!(store.block_of_index(4), "b");
    }

    #[test]
    #[should_panic(expected = "duplicate parameter block")]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new();
        store.register("w", vec![0.0]);
        store.register("w", vec![1.0]);
    }
}
