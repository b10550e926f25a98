//! Flat parameter storage: every learnable tensor lives in one contiguous
//! value buffer with a parallel gradient buffer, addressed by named
//! blocks. The flat layout makes the optimizer, checkpointing, and
//! finite-difference probing uniform over all parameters.

use std::collections::HashMap;

use crate::clip::backend::Real;
use crate::{Error, Result};

/// Addressing info for one named parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Handle {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Handle {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.off..self.off + self.len()
    }
}

/// Metadata for one block, in registration order.
#[derive(Debug, Clone)]
pub struct BlockMeta {
    pub name: String,
    pub handle: Handle,
    /// Whether AdamW applies weight decay to this tensor (matrices yes,
    /// vectors and scalars no).
    pub decay: bool,
}

#[derive(Debug, Clone)]
pub struct ParamStore<T: Real> {
    blocks: Vec<BlockMeta>,
    by_name: HashMap<String, usize>,
    pub values: Vec<T>,
    pub grads: Vec<T>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            blocks: Vec::new(),
            by_name: HashMap::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Register a rows x cols tensor, zero-initialized.
    pub fn add(&mut self, name: &str, rows: usize, cols: usize, decay: bool) -> Handle {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter block {name:?}"
        );
        let handle = Handle {
            off: self.values.len(),
            rows,
            cols,
        };
        self.values.resize(self.values.len() + rows * cols, T::zero());
        self.grads.resize(self.values.len(), T::zero());
        self.by_name.insert(name.to_string(), self.blocks.len());
        self.blocks.push(BlockMeta {
            name: name.to_string(),
            handle,
            decay,
        });
        handle
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn blocks(&self) -> &[BlockMeta] {
        &self.blocks
    }

    pub fn handle(&self, name: &str) -> Result<Handle> {
        self.by_name
            .get(name)
            .map(|&i| self.blocks[i].handle)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter block named {name:?}")))
    }

    pub fn value(&self, h: Handle) -> &[T] {
        &self.values[h.range()]
    }

    pub fn value_mut(&mut self, h: Handle) -> &mut [T] {
        &mut self.values[h.range()]
    }

    pub fn grad(&self, h: Handle) -> &[T] {
        &self.grads[h.range()]
    }

    pub fn zero_grads(&mut self) {
        self.grads.fill(T::zero());
    }

    /// True when every value is finite.
    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Borrow a named slice out of a raw value buffer (used where the store
/// itself is split-borrowed between values and grads).
pub fn slice<T: Real>(buf: &[T], h: Handle) -> &[T] {
    &buf[h.range()]
}

pub fn slice_mut<T: Real>(buf: &mut [T], h: Handle) -> &mut [T] {
    &mut buf[h.range()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_and_lookup() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let a = store.add("w", 2, 3, true);
        let b = store.add("b", 1, 3, false);
        assert_eq!(store.len(), 9);
        assert_eq!(a.len(), 6);
        assert_eq!(b.off, 6);
        assert_eq!(store.handle("b").unwrap(), b);
        assert!(store.handle("missing").is_err());
        store.value_mut(a)[4] = 2.5;
        assert_eq!(store.value(a)[4], 2.5);
        assert!(store.all_finite());
        store.value_mut(b)[0] = f32::NAN;
        assert!(!store.all_finite());
    }

    #[test]
    #[should_panic(expected = "duplicate parameter block")]
    fn duplicate_names_panic() {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.add("w", 1, 1, true);
        store.add("w", 1, 1, true);
    }
}
