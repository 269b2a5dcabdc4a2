//! Key/value caches for streaming attention.
//!
//! The production cache holds, per (block, denoising step), the identity-sink
//! KV written once at stream start plus a ring of exactly one previous chunk,
//! so its footprint is constant in the chunk counter. The full-history cache
//! keeps every chunk and backs the brute-force equivalence oracle.

use crate::error::{RestError, Result};
use crate::tensor::Tensor;

type Kv = (Tensor, Tensor);

fn check_kv_shape(slot: &str, old: &Kv, new: &Kv) -> Result<()> {
    if old.0.dims() != new.0.dims() || old.1.dims() != new.1.dims() {
        return Err(RestError::Cache(format!(
            "{slot}: stored K/V {:?}/{:?} vs incoming {:?}/{:?} (layout drift between chunks)",
            old.0.dims(),
            old.1.dims(),
            new.0.dims(),
            new.1.dims()
        )));
    }
    Ok(())
}

/// Fixed-size streaming cache: one ID-sink slot and one previous-chunk slot
/// per (block, step).
pub struct IdContextCache {
    sink: Vec<Vec<Option<Kv>>>,
    ctx: Vec<Vec<Option<Kv>>>,
    blocks: usize,
    steps: usize,
    /// 1-based index of the next chunk to process.
    pub chunk_counter: usize,
}

impl IdContextCache {
    pub fn zeros(blocks: usize, steps: usize) -> Self {
        IdContextCache {
            sink: vec![vec![None; steps]; blocks],
            ctx: vec![vec![None; steps]; blocks],
            blocks,
            steps,
            chunk_counter: 1,
        }
    }

    fn check_slot(&self, block: usize, step: usize) -> Result<()> {
        if block >= self.blocks || step >= self.steps {
            return Err(RestError::Cache(format!(
                "cache slot ({block}, {step}) outside {}x{}",
                self.blocks, self.steps
            )));
        }
        Ok(())
    }

    pub fn sink(&self, block: usize, step: usize) -> Option<&Kv> {
        self.sink[block][step].as_ref()
    }

    pub fn context(&self, block: usize, step: usize) -> Option<&Kv> {
        self.ctx[block][step].as_ref()
    }

    /// Write the ID sink once; later writes must not happen (the sink is
    /// immutable for the whole stream).
    pub fn put_sink(&mut self, block: usize, step: usize, kv: Kv) -> Result<()> {
        self.check_slot(block, step)?;
        if self.sink[block][step].is_some() {
            return Err(RestError::Cache(format!(
                "ID sink slot ({block}, {step}) written twice"
            )));
        }
        self.sink[block][step] = Some(kv);
        Ok(())
    }

    /// Overwrite the previous-chunk slot with the current chunk's KV.
    pub fn put_context(&mut self, block: usize, step: usize, kv: Kv) -> Result<()> {
        self.check_slot(block, step)?;
        if let Some(old) = &self.ctx[block][step] {
            check_kv_shape("context cache", old, &kv)?;
        }
        self.ctx[block][step] = Some(kv);
        Ok(())
    }

    pub fn advance_chunk(&mut self) {
        self.chunk_counter += 1;
    }

    /// Bytes held by cached tensor payloads.
    pub fn bytes(&self) -> usize {
        let kv_bytes = |kv: &Option<Kv>| {
            kv.as_ref()
                .map(|(k, v)| 4 * (k.numel() + v.numel()))
                .unwrap_or(0)
        };
        let mut total = 0;
        for b in 0..self.blocks {
            for s in 0..self.steps {
                total += kv_bytes(&self.sink[b][s]) + kv_bytes(&self.ctx[b][s]);
            }
        }
        total
    }

    /// FNV-1a hash over the sink payload bit patterns, for immutability checks.
    pub fn sink_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |t: &Tensor| {
            for v in t.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01B3);
                }
            }
        };
        for row in &self.sink {
            for kv in row.iter().flatten() {
                eat(&kv.0);
                eat(&kv.1);
            }
        }
        h
    }

    /// Drop graph history from all cached tensors (used between inference
    /// steps so the graph of one step does not pin earlier ones).
    pub fn detach_all(&mut self) {
        for grid in [&mut self.sink, &mut self.ctx] {
            for row in grid.iter_mut() {
                for kv in row.iter_mut().flatten() {
                    kv.0 = kv.0.detach();
                    kv.1 = kv.1.detach();
                }
            }
        }
    }
}

/// Unbounded cache that remembers every chunk's KV per (block, step). Memory
/// grows linearly with the chunk counter; used as the naive baseline in the
/// scaling benchmark and as the materialization source for the brute-force
/// attention oracle.
pub struct FullHistoryCache {
    sink: Vec<Vec<Option<Kv>>>,
    history: Vec<Vec<Vec<Kv>>>,
    blocks: usize,
    steps: usize,
    pub chunk_counter: usize,
}

impl FullHistoryCache {
    pub fn zeros(blocks: usize, steps: usize) -> Self {
        FullHistoryCache {
            sink: vec![vec![None; steps]; blocks],
            history: vec![vec![Vec::new(); steps]; blocks],
            blocks,
            steps,
            chunk_counter: 1,
        }
    }

    pub fn sink(&self, block: usize, step: usize) -> Option<&Kv> {
        self.sink[block][step].as_ref()
    }

    /// KV of chunk `i` (1-based) at (block, step).
    pub fn chunk(&self, block: usize, step: usize, i: usize) -> Option<&Kv> {
        self.history[block][step].get(i - 1)
    }

    pub fn last(&self, block: usize, step: usize) -> Option<&Kv> {
        self.history[block][step].last()
    }

    pub fn put_sink(&mut self, block: usize, step: usize, kv: Kv) -> Result<()> {
        if self.sink[block][step].is_some() {
            return Err(RestError::Cache(format!(
                "ID sink slot ({block}, {step}) written twice"
            )));
        }
        self.sink[block][step] = Some(kv);
        Ok(())
    }

    pub fn push_chunk(&mut self, block: usize, step: usize, kv: Kv) -> Result<()> {
        if block >= self.blocks || step >= self.steps {
            return Err(RestError::Cache(format!(
                "cache slot ({block}, {step}) outside {}x{}",
                self.blocks, self.steps
            )));
        }
        if let Some(old) = self.history[block][step].last() {
            check_kv_shape("history cache", old, &kv)?;
        }
        self.history[block][step].push(kv);
        Ok(())
    }

    pub fn advance_chunk(&mut self) {
        self.chunk_counter += 1;
    }

    pub fn bytes(&self) -> usize {
        let mut total = 0;
        for b in 0..self.blocks {
            for s in 0..self.steps {
                if let Some((k, v)) = &self.sink[b][s] {
                    total += 4 * (k.numel() + v.numel());
                }
                for (k, v) in &self.history[b][s] {
                    total += 4 * (k.numel() + v.numel());
                }
            }
        }
        total
    }
}
