use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Fixed-capacity FIFO of unit-norm target embeddings, each tagged with the
/// id of the sample it came from.
#[derive(Clone, Debug)]
pub struct ContextQueue {
    capacity: usize,
    dim: usize,
    slots: Vec<f64>,
    ids: Vec<usize>,
    len: usize,
    /// Slot the next push writes to; also the oldest entry once full.
    cursor: usize,
}

impl ContextQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::invalid("queue capacity and dimension must be positive"));
        }
        Ok(Self {
            capacity,
            dim,
            slots: vec![0.0; capacity * dim],
            ids: vec![0; capacity],
            len: 0,
            cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len == self.capacity
    }

    /// Appends the rows of `batch` in order, l2-normalizing each, and evicts
    /// the oldest entries past capacity.
    pub fn push(&mut self, batch: &Tensor, ids: &[usize]) -> Result<()> {
        let (rows, d) = batch.dims2("queue_push")?;
        if d != self.dim {
            return Err(Error::shape("queue_push", format!("embedding dim {d}, queue dim {}", self.dim)));
        }
        if ids.len() != rows {
            return Err(Error::shape("queue_push", format!("{rows} rows with {} ids", ids.len())));
        }
        for (row, &id) in batch.data().chunks(d).zip(ids) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::autodiff::NORM_EPS);
            let slot = &mut self.slots[self.cursor * d..(self.cursor + 1) * d];
            for (s, x) in slot.iter_mut().zip(row) {
                *s = x / norm;
            }
            self.ids[self.cursor] = id;
            self.cursor = (self.cursor + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
        }
        Ok(())
    }

    fn physical(&self, i: usize) -> usize {
        let start = if self.is_full() { self.cursor } else { 0 };
        (start + i) % self.capacity
    }

    /// Entry `i`, counted from the oldest.
    pub fn entry(&self, i: usize) -> &[f64] {
        assert!(i < self.len, "queue index {i} out of {}", self.len);
        let p = self.physical(i);
        &self.slots[p * self.dim..(p + 1) * self.dim]
    }

    pub fn id(&self, i: usize) -> usize {
        assert!(i < self.len, "queue index {i} out of {}", self.len);
        self.ids[self.physical(i)]
    }

    /// Entries oldest first as `[len, dim]`.
    pub fn snapshot(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::invalid("queue is empty"));
        }
        let mut data = Vec::with_capacity(self.len * self.dim);
        for i in 0..self.len {
            data.extend_from_slice(self.entry(i));
        }
        Tensor::new(vec![self.len, self.dim], data)
    }

    pub fn ids_in_order(&self) -> Vec<usize> {
        (0..self.len).map(|i| self.id(i)).collect()
    }

    /// Rebuilds a queue from its oldest-first contents.
    pub fn from_parts(capacity: usize, entries: &Tensor, ids: &[usize]) -> Result<Self> {
        let (_, d) = entries.dims2("queue restore")?;
        let mut q = Self::new(capacity, d)?;
        if ids.len() > capacity {
            return Err(Error::Format("queue holds more entries than its capacity".into()));
        }
        for (row, &id) in entries.data().chunks(d).zip(ids) {
            let start = q.len * d;
            q.slots[start..start + d].copy_from_slice(row);
            q.ids[q.len] = id;
            q.len += 1;
        }
        q.cursor = q.len % capacity;
        Ok(q)
    }
}

/// Equal when capacity and the oldest-first contents agree, whatever the
/// physical ring position.
impl PartialEq for ContextQueue {
    fn eq(&self, other: &Self) -> bool {
        self.capacity == other.capacity
            && self.dim == other.dim
            && self.len == other.len
            && (0..self.len).all(|i| self.id(i) == other.id(i) && self.entry(i) == other.entry(i))
    }
}
