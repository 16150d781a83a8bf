//! Discrete-event timing model of the scalar, DMA, vector and cube queues.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::Serialize;

use crate::error::DecodeError;
use crate::isa::{
    decode_program, BytecodeProgram, Extras, InstructionKind as K, Queue, ViewMode,
    VirtualInstruction,
};
use crate::tiler::{DeviceConfig, TimingParams};

use super::tile_range;

/// Modeled busy cycles per queue.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct QueueBusy {
    pub scalar: f64,
    pub dma: f64,
    pub vector: f64,
    pub cube: f64,
}

impl QueueBusy {
    fn slot(&mut self, q: Queue) -> &mut f64 {
        match q {
            Queue::Dma => &mut self.dma,
            Queue::Vector => &mut self.vector,
            Queue::Cube => &mut self.cube,
            Queue::Scalar => &mut self.scalar,
        }
    }

    pub fn max(&self) -> f64 {
        self.scalar.max(self.dma).max(self.vector).max(self.cube)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CoreTiming {
    pub core: u32,
    pub tiles: u64,
    pub busy: QueueBusy,
    pub finish: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ExecutionStats {
    pub cores: Vec<CoreTiming>,
    /// Latest completion over all queues and cores, excluding launch overhead.
    pub makespan: f64,
    /// Makespan of the same run with a decode cost of zero.
    pub zero_decode_makespan: f64,
    /// Decoding added at most one body's worth of decode time to the makespan.
    pub decode_hidden: bool,
    pub counts: BTreeMap<String, u64>,
    pub global_bytes: u64,
    pub launches: u32,
}

impl ExecutionStats {
    /// Stats of two runs on disjoint cores that start together.
    pub fn alongside(mut self, other: ExecutionStats) -> ExecutionStats {
        self.makespan = self.makespan.max(other.makespan);
        self.zero_decode_makespan = self.zero_decode_makespan.max(other.zero_decode_makespan);
        self.absorb(other);
        self
    }

    /// Stats of `other` run after `self` completes.
    pub fn followed_by(mut self, other: ExecutionStats) -> ExecutionStats {
        self.makespan += other.makespan;
        self.zero_decode_makespan += other.zero_decode_makespan;
        self.absorb(other);
        self
    }

    fn absorb(&mut self, other: ExecutionStats) {
        self.decode_hidden &= other.decode_hidden;
        self.global_bytes += other.global_bytes;
        self.launches = self.launches.max(other.launches);
        for (k, v) in other.counts {
            *self.counts.entry(k).or_default() += v;
        }
        self.cores.extend(other.cores);
    }

    /// Makespan plus `launches` launch overheads.
    pub fn total_time(&self, timing: &TimingParams) -> f64 {
        self.makespan + self.launches as f64 * timing.launch
    }
}

/// Elements of tile `tile` a grid view actually touches.
fn grid_inside(insn: &VirtualInstruction, tile: u64) -> Option<u64> {
    let Extras::View(v) = &insn.extras else {
        return None;
    };
    let ViewMode::Grid {
        swizzle,
        rows,
        cols,
    } = v.mode
    else {
        return None;
    };
    let (ti, tj) = swizzle.coords(tile as usize, rows as usize, cols as usize);
    let mut n = 1u64;
    for ((anchor, &size), &extent) in v.anchors.iter().zip(&v.sizes).zip(&v.extents) {
        let block = match anchor {
            crate::isa::Anchor::Row => ti as u64,
            crate::isa::Anchor::Col => tj as u64,
            crate::isa::Anchor::Fixed(b) => *b as u64,
        };
        let origin = block * size as u64;
        n *= (size as u64).min((extent as u64).saturating_sub(origin));
    }
    Some(n)
}

/// Global bytes a memory instruction moves for `tile`.
pub(crate) fn bytes_moved(insn: &VirtualInstruction, tile: u64) -> u64 {
    let elem = match &insn.extras {
        Extras::Mem { dtype, .. } => dtype.bytes() as u64,
        Extras::View(v) => v.dtype.bytes() as u64,
        _ => return 0,
    };
    let n = grid_inside(insn, tile).unwrap_or_else(|| insn.effective_size(tile));
    n * elem
}

fn cost(insn: &VirtualInstruction, tile: u64, t: &TimingParams) -> f64 {
    match insn.kind {
        K::Load | K::ViewLoad | K::Store | K::ViewStore => {
            bytes_moved(insn, tile) as f64 * t.dma_per_byte
        }
        K::SyncSet | K::SyncWait => t.sync,
        K::Matmul => match insn.extras {
            Extras::Matmul { m, k, n, .. } => {
                (m as u64 * k as u64 * n as u64) as f64 * t.cube_per_mac
            }
            _ => 0.0,
        },
        _ => insn.effective_size(tile) as f64 * t.vector_per_elem,
    }
}

fn simulate_core(
    body: &[VirtualInstruction],
    tiles: std::ops::Range<u64>,
    t: &TimingParams,
) -> (QueueBusy, f64) {
    let mut busy = QueueBusy::default();
    let mut free: HashMap<Queue, f64> = HashMap::new();
    let mut flags: HashMap<u32, VecDeque<f64>> = HashMap::new();
    let mut decoded = 0.0f64;
    for tile in tiles {
        for insn in body {
            decoded += t.decode;
            busy.scalar += t.decode;
            let q = insn.queue();
            let mut start = decoded.max(free.get(&q).copied().unwrap_or(0.0));
            if let (K::SyncWait, Extras::Sync(f)) = (insn.kind, &insn.extras) {
                // A wait with no pending set never releases; treat it as ready.
                if let Some(release) = flags.get_mut(&f.pack()).and_then(|v| v.pop_front()) {
                    start = start.max(release);
                }
            }
            let c = cost(insn, tile, t);
            let end = start + c;
            free.insert(q, end);
            *busy.slot(q) += c;
            if let (K::SyncSet, Extras::Sync(f)) = (insn.kind, &insn.extras) {
                flags.entry(f.pack()).or_default().push_back(end);
            }
        }
    }
    let finish = free.values().copied().fold(decoded, f64::max);
    (busy, finish)
}

fn run_model(
    body: &[VirtualInstruction],
    program: &BytecodeProgram,
    t: &TimingParams,
) -> (Vec<CoreTiming>, f64) {
    let h = &program.header;
    let mut cores = Vec::with_capacity(h.block_dim as usize);
    let mut makespan = 0.0f64;
    for id in 0..h.block_dim {
        let tiles = tile_range(id, h.total_tiles, h.block_dim);
        let n = tiles.end - tiles.start;
        let (busy, finish) = simulate_core(body, tiles, t);
        makespan = makespan.max(finish);
        cores.push(CoreTiming {
            core: id,
            tiles: n,
            busy,
            finish,
        });
    }
    (cores, makespan)
}

/// Models `program` on `cfg`. Core `i` runs the tiles `tile_range` assigns it.
pub fn simulate_timing(
    program: &BytecodeProgram,
    cfg: &DeviceConfig,
) -> Result<ExecutionStats, DecodeError> {
    let body = decode_program(program)?;
    let t = cfg.timing;
    let (cores, makespan) = run_model(&body, program, &t);
    let zero = TimingParams { decode: 0.0, ..t };
    let (_, zero_decode_makespan) = run_model(&body, program, &zero);
    let burst = body.len() as f64 * t.decode;
    let slack = 1e-9 * makespan.max(1.0);
    let h = &program.header;
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut global_bytes = 0u64;
    for id in 0..h.block_dim {
        for tile in tile_range(id, h.total_tiles, h.block_dim) {
            for insn in &body {
                *counts.entry(insn.kind.mnemonic().to_string()).or_default() += 1;
                global_bytes += bytes_moved(insn, tile);
            }
        }
    }
    Ok(ExecutionStats {
        cores,
        makespan,
        zero_decode_makespan,
        decode_hidden: makespan <= zero_decode_makespan + burst + slack,
        counts,
        global_bytes,
        launches: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{encode_program, KernelType, ProgramHeader, SyncFlag};
    use crate::scalar::Dtype;

    fn cfg(decode: f64, vector: f64, sync: f64) -> DeviceConfig {
        DeviceConfig {
            num_cores: 1,
            timing: TimingParams {
                decode,
                vector_per_elem: vector,
                sync,
                ..TimingParams::default()
            },
            ..DeviceConfig::default()
        }
    }

    /// Three zero-cost syncs followed by one vector op of `n` elements.
    fn pipeline_program(k: u32, n: u32) -> BytecodeProgram {
        let f0 = SyncFlag::new(0, Queue::Dma, Queue::Vector);
        let f1 = SyncFlag::new(1, Queue::Dma, Queue::Vector);
        let body = vec![
            VirtualInstruction::sync_set(f0),
            VirtualInstruction::sync_wait(f0),
            VirtualInstruction::sync_set(f1),
            VirtualInstruction::new(K::Sqrt, 0, vec![0], n, n * k, Extras::None),
        ];
        encode_program(ProgramHeader::new(KernelType::Vector, k, 1), &body).unwrap()
    }

    #[test]
    fn pipeline_identity() {
        for (d, e, k) in [(1.0, 5.0, 1), (1.0, 8.0, 7), (0.5, 3.0, 12), (2.0, 9.0, 4)] {
            let stats = simulate_timing(&pipeline_program(k, e as u32), &cfg(d, 1.0, 0.0)).unwrap();
            assert_eq!(stats.makespan, 4.0 * d + k as f64 * e, "d={d} e={e} k={k}");
            assert!(stats.decode_hidden);
        }
    }

    #[test]
    fn zero_decode_is_pure_execution() {
        let stats = simulate_timing(&pipeline_program(5, 6), &cfg(0.0, 1.0, 0.0)).unwrap();
        assert_eq!(stats.makespan, 30.0);
        assert_eq!(stats.makespan, stats.zero_decode_makespan);
    }

    #[test]
    fn slow_decode_is_not_hidden() {
        let stats = simulate_timing(&pipeline_program(6, 2), &cfg(3.0, 1.0, 0.0)).unwrap();
        assert!(!stats.decode_hidden);
        assert!(stats.makespan >= 6.0 * 4.0 * 3.0);
    }

    #[test]
    fn bytes_and_busy_invariants() {
        let mem = |kind, dst, src| {
            VirtualInstruction::new(
                kind,
                dst,
                vec![src],
                4,
                10,
                Extras::Mem {
                    tile_stride: 4,
                    dtype: Dtype::F32,
                },
            )
        };
        let body = crate::encoder::insert_syncs(&[
            mem(K::Load, 0, 0),
            VirtualInstruction::new(K::Exp, 16, vec![0], 4, 10, Extras::None),
            mem(K::Store, 64, 16),
        ])
        .unwrap();
        let p = encode_program(ProgramHeader::new(KernelType::Vector, 3, 2), &body).unwrap();
        let stats = simulate_timing(&p, &DeviceConfig::default()).unwrap();
        assert_eq!(stats.global_bytes, 80);
        assert_eq!(
            stats.cores.iter().map(|c| c.tiles).collect::<Vec<_>>(),
            [2, 1]
        );
        for c in &stats.cores {
            assert!(stats.makespan >= c.busy.max());
        }
        assert_eq!(stats.counts["Exp"], 3);
    }
}
