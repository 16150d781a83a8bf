//! Local-memory hazard analysis and set/wait flag insertion.

use std::collections::HashMap;
use std::ops::Range;

use crate::isa::{Extras, InstructionKind as K, Queue, SyncFlag, VirtualInstruction};
use crate::scalar::Dtype;

/// Number of distinct flag ids handed out round-robin.
pub const SYNC_EVENTS: u16 = 16;

/// Local byte ranges an instruction reads and writes for one full tile.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Access {
    pub reads: Vec<Range<u64>>,
    pub writes: Vec<Range<u64>>,
}

fn span(start: u64, elems: u64, dtype: Dtype) -> Range<u64> {
    start..start + elems * dtype.bytes() as u64
}

fn overlaps(a: &Range<u64>, b: &Range<u64>) -> bool {
    a.start < b.end && b.start < a.end
}

impl Access {
    fn conflicts(&self, later: &Access) -> bool {
        let any = |xs: &[Range<u64>], ys: &[Range<u64>]| {
            xs.iter().any(|x| ys.iter().any(|y| overlaps(x, y)))
        };
        any(&self.writes, &later.reads)
            || any(&self.reads, &later.writes)
            || any(&self.writes, &later.writes)
    }
}

/// Derives per-instruction local accesses by propagating element types from
/// loads and casts through the body.
pub fn body_accesses(body: &[VirtualInstruction]) -> Result<Vec<Access>, String> {
    let mut tags: HashMap<u64, Dtype> = HashMap::new();
    let mut out = Vec::with_capacity(body.len());
    for (idx, insn) in body.iter().enumerate() {
        let tag = |tags: &HashMap<u64, Dtype>, a: u64| {
            tags.get(&a).copied().ok_or_else(|| {
                format!(
                    "instruction {idx} ({}) reads untyped local {a:#x}",
                    insn.kind
                )
            })
        };
        let tile = insn.tile_size as u64;
        let mut acc = Access::default();
        match (&insn.extras, insn.kind) {
            (_, K::SyncSet | K::SyncWait) => {}
            (Extras::Mem { dtype, .. }, K::Load) => {
                acc.writes.push(span(insn.dst, tile, *dtype));
                tags.insert(insn.dst, *dtype);
            }
            (Extras::View(v), K::ViewLoad) => {
                acc.writes.push(span(insn.dst, tile, v.dtype));
                tags.insert(insn.dst, v.dtype);
            }
            (Extras::Mem { dtype, .. }, K::Store) => {
                acc.reads.push(span(insn.srcs[0], tile, *dtype))
            }
            (Extras::View(v), K::ViewStore) => acc.reads.push(span(insn.srcs[0], tile, v.dtype)),
            (
                Extras::Matmul {
                    m,
                    k,
                    n,
                    accumulate,
                },
                K::Matmul,
            ) => {
                let (m, k, n) = (*m as u64, *k as u64, *n as u64);
                let ta = tag(&tags, insn.srcs[0])?;
                let tb = tag(&tags, insn.srcs[1])?;
                acc.reads.push(span(insn.srcs[0], m * k, ta));
                acc.reads.push(span(insn.srcs[1], k * n, tb));
                if *accumulate {
                    acc.reads.push(span(insn.dst, m * n, ta));
                }
                acc.writes.push(span(insn.dst, m * n, ta));
                tags.insert(insn.dst, ta);
            }
            (Extras::Cast { from, to }, K::Cast) => {
                acc.reads.push(span(insn.srcs[0], tile, *from));
                acc.writes.push(span(insn.dst, tile, *to));
                tags.insert(insn.dst, *to);
            }
            (Extras::Shape3 { size, .. }, K::Sum | K::ReduceMax | K::ReduceMin) => {
                let t = tag(&tags, insn.srcs[0])?;
                acc.reads.push(span(insn.srcs[0], tile, t));
                acc.writes.push(span(insn.dst, tile / *size as u64, t));
                tags.insert(insn.dst, t);
            }
            (Extras::Shape3 { size, .. }, K::Broadcast) => {
                let t = tag(&tags, insn.srcs[0])?;
                acc.reads.push(span(insn.srcs[0], tile / *size as u64, t));
                acc.writes.push(span(insn.dst, tile, t));
                tags.insert(insn.dst, t);
            }
            _ => {
                let mut result = None;
                for (j, &s) in insn.srcs.iter().enumerate() {
                    let t = tag(&tags, s)?;
                    acc.reads.push(span(s, tile, t));
                    let data_operand = if insn.kind == K::Select { 1 } else { 0 };
                    if j == data_operand {
                        result = Some(t);
                    }
                }
                let t = result.ok_or_else(|| format!("instruction {idx} has no operands"))?;
                acc.writes.push(span(insn.dst, tile, t));
                tags.insert(insn.dst, t);
            }
        }
        out.push(acc);
    }
    Ok(out)
}

/// Vector clock: per queue, the last sequence position known complete.
type Clock = [i64; 4];

fn join(a: &mut Clock, b: &Clock) {
    for (x, y) in a.iter_mut().zip(b) {
        *x = (*x).max(*y);
    }
}

/// Happens-before state of a simulated instruction stream.
struct Ordering {
    queue_clock: [Clock; 4],
    flags: HashMap<u32, Vec<Clock>>,
    history: Vec<(i64, Queue, usize)>,
    pos: i64,
}

impl Ordering {
    fn new() -> Self {
        Ordering {
            queue_clock: [[-1; 4]; 4],
            flags: HashMap::new(),
            history: Vec::new(),
            pos: 0,
        }
    }

    /// Source queues of earlier instructions conflicting with `acc` that are not
    /// yet ordered before an instruction on `q`.
    fn unordered(&self, q: Queue, acc: &Access, accesses: &[Access]) -> Vec<Queue> {
        let known = &self.queue_clock[q.code() as usize];
        let mut out: Vec<Queue> = Vec::new();
        for &(pos, yq, yi) in &self.history {
            if yq != q
                && known[yq.code() as usize] < pos
                && accesses[yi].conflicts(acc)
                && !out.contains(&yq)
            {
                out.push(yq);
            }
        }
        out.sort_by_key(|q| q.code());
        out
    }

    fn execute(&mut self, q: Queue, body_index: Option<usize>) {
        let qi = q.code() as usize;
        self.queue_clock[qi][qi] = self.pos;
        if let Some(i) = body_index {
            self.history.push((self.pos, q, i));
        }
        self.pos += 1;
    }

    fn set(&mut self, flag: SyncFlag) {
        let qi = flag.from.code() as usize;
        self.queue_clock[qi][qi] = self.pos;
        let clock = self.queue_clock[qi];
        self.flags.entry(flag.pack()).or_default().push(clock);
        self.pos += 1;
    }

    fn wait(&mut self, flag: SyncFlag) -> Result<(), String> {
        let clock = self
            .flags
            .get_mut(&flag.pack())
            .and_then(|v| {
                if v.is_empty() {
                    None
                } else {
                    Some(v.remove(0))
                }
            })
            .ok_or_else(|| format!("wait on event {} without a matching set", flag.event))?;
        let qi = flag.to.code() as usize;
        join(&mut self.queue_clock[qi], &clock);
        self.queue_clock[qi][qi] = self.pos;
        self.pos += 1;
        Ok(())
    }
}

/// Inserts the set/wait pairs needed so every cross-queue hazard, including
/// those between consecutive tiles, is ordered.
pub fn insert_syncs(body: &[VirtualInstruction]) -> Result<Vec<VirtualInstruction>, String> {
    let accesses = body_accesses(body)?;
    let queues: Vec<Queue> = body.iter().map(|i| i.queue()).collect();
    let mut pre: Vec<Vec<Queue>> = vec![Vec::new(); body.len()];
    loop {
        let mut changed = false;
        let mut ord = Ordering::new();
        for _copy in 0..2 {
            for i in 0..body.len() {
                let q = queues[i];
                for &src in &pre[i] {
                    let flag = SyncFlag::new(0, src, q);
                    ord.set(flag);
                    ord.wait(flag)?;
                }
                for src in ord.unordered(q, &accesses[i], &accesses) {
                    let flag = SyncFlag::new(0, src, q);
                    ord.set(flag);
                    ord.wait(flag)?;
                    pre[i].push(src);
                    changed = true;
                }
                ord.execute(q, Some(i));
            }
        }
        if !changed {
            break;
        }
    }
    let mut out = Vec::with_capacity(body.len() * 2);
    let mut event = 0u16;
    for (i, insn) in body.iter().enumerate() {
        for &src in &pre[i] {
            let flag = SyncFlag::new(event, src, queues[i]);
            out.push(VirtualInstruction::sync_set(flag));
            out.push(VirtualInstruction::sync_wait(flag));
            event = (event + 1) % SYNC_EVENTS;
        }
        out.push(insn.clone());
    }
    Ok(out)
}

/// Verifies that every cross-queue local hazard in the body, executed twice
/// back to back, is ordered by queue order or a set/wait pair.
pub fn check_syncs(body: &[VirtualInstruction]) -> Result<(), String> {
    let accesses = body_accesses(body)?;
    let mut ord = Ordering::new();
    for copy in 0..2 {
        for (i, insn) in body.iter().enumerate() {
            match (&insn.extras, insn.kind) {
                (Extras::Sync(f), K::SyncSet) => ord.set(*f),
                (Extras::Sync(f), K::SyncWait) => ord.wait(*f)?,
                _ => {
                    let q = insn.queue();
                    let missing = ord.unordered(q, &accesses[i], &accesses);
                    if let Some(src) = missing.first() {
                        return Err(format!(
                            "instruction {i} ({}) on {} is not ordered after a conflicting {} instruction (tile copy {copy})",
                            insn.kind,
                            q.name(),
                            src.name()
                        ));
                    }
                    ord.execute(q, Some(i));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(dst: u64, src: u64) -> VirtualInstruction {
        VirtualInstruction::new(
            K::Load,
            dst,
            vec![src],
            8,
            64,
            Extras::Mem {
                tile_stride: 8,
                dtype: Dtype::F32,
            },
        )
    }

    fn store(dst: u64, src: u64) -> VirtualInstruction {
        VirtualInstruction::new(
            K::Store,
            dst,
            vec![src],
            8,
            64,
            Extras::Mem {
                tile_stride: 8,
                dtype: Dtype::F32,
            },
        )
    }

    #[test]
    fn add_gets_two_pairs() {
        let add = VirtualInstruction::new(K::Add, 64, vec![0, 32], 8, 64, Extras::None);
        let body = vec![load(0, 0x1000), load(32, 0x2000), add, store(0x3000, 64)];
        let synced = insert_syncs(&body).unwrap();
        let kinds: Vec<K> = synced.iter().map(|i| i.kind).collect();
        assert_eq!(
            kinds,
            [
                K::Load,
                K::Load,
                K::SyncSet,
                K::SyncWait,
                K::Add,
                K::SyncSet,
                K::SyncWait,
                K::Store
            ]
        );
        check_syncs(&synced).unwrap();
        assert!(check_syncs(&body).is_err());
    }

    #[test]
    fn cross_tile_war_is_detected() {
        // Sqrt reads slot 0 and nothing orders the next tile's load after it.
        let sqrt = VirtualInstruction::new(K::Sqrt, 32, vec![0], 8, 64, Extras::None);
        let dma_to_vec = SyncFlag::new(0, Queue::Dma, Queue::Vector);
        let body = vec![
            load(0, 0x1000),
            VirtualInstruction::sync_set(dma_to_vec),
            VirtualInstruction::sync_wait(dma_to_vec),
            sqrt,
        ];
        let err = check_syncs(&body).unwrap_err();
        assert!(err.contains("copy 1"), "{err}");
    }
}
