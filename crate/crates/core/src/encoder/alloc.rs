use std::collections::BTreeMap;

use crate::graph::TensorId;

/// What a local block holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BufferKey {
    Tensor(TensorId),
    /// Left matmul operand slab.
    SlabA,
    /// Right matmul operand slab.
    SlabB,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub offset: usize,
    pub len: usize,
}

impl Block {
    pub fn end(&self) -> usize {
        self.offset + self.len
    }
}

/// Local-memory placement of every tile buffer of one kernel.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LocalAllocation {
    pub blocks: BTreeMap<BufferKey, Block>,
    pub high_water: usize,
}

impl LocalAllocation {
    pub fn offset(&self, key: BufferKey) -> Option<u64> {
        self.blocks.get(&key).map(|b| b.offset as u64)
    }

    pub fn tensor(&self, t: TensorId) -> Option<Block> {
        self.blocks.get(&BufferKey::Tensor(t)).copied()
    }
}

/// First-fit allocator over freed blocks, bumping the high-water mark otherwise.
#[derive(Debug, Default)]
pub(crate) struct FirstFit {
    free: Vec<Block>,
    top: usize,
    pub(crate) high_water: usize,
}

impl FirstFit {
    pub(crate) fn with_base(base: usize) -> Self {
        FirstFit {
            free: Vec::new(),
            top: base,
            high_water: base,
        }
    }

    pub(crate) fn alloc(&mut self, len: usize) -> Block {
        if let Some(i) = self.free.iter().position(|b| b.len >= len) {
            let b = self.free[i];
            if b.len == len {
                self.free.remove(i);
            } else {
                self.free[i] = Block {
                    offset: b.offset + len,
                    len: b.len - len,
                };
            }
            return Block {
                offset: b.offset,
                len,
            };
        }
        let block = Block {
            offset: self.top,
            len,
        };
        self.top += len;
        self.high_water = self.high_water.max(self.top);
        block
    }

    pub(crate) fn free(&mut self, block: Block) {
        let i = self.free.partition_point(|b| b.offset < block.offset);
        self.free.insert(i, block);
        // Coalesce neighbours.
        let mut j = 0;
        while j + 1 < self.free.len() {
            if self.free[j].end() == self.free[j + 1].offset {
                self.free[j].len += self.free[j + 1].len;
                self.free.remove(j + 1);
            } else {
                j += 1;
            }
        }
        if let Some(last) = self.free.last() {
            if last.end() == self.top {
                self.top = last.offset;
                self.free.pop();
            }
        }
    }
}
