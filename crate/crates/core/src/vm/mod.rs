//! Simulated multi-core device: functional execution and a timing model.

mod exec;
mod timing;

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use rayon::prelude::*;

use crate::error::VmError;
use crate::isa::{BytecodeProgram, InstructionKind};
use crate::scalar::Dtype;
use crate::tiler::DeviceConfig;

pub use timing::{simulate_timing, CoreTiming, ExecutionStats, QueueBusy};

/// Per-core scratchpad plus the element type last written at each offset.
#[derive(Clone, Debug)]
pub struct CoreState {
    pub local: Vec<u8>,
    tags: HashMap<u64, Dtype>,
}

impl CoreState {
    fn new(bytes: usize) -> Self {
        CoreState {
            local: vec![0; bytes],
            tags: HashMap::new(),
        }
    }
}

/// Global memory and the cores of one device.
#[derive(Clone, Debug)]
pub struct DeviceState {
    pub cfg: DeviceConfig,
    pub global: Vec<u8>,
    cores: Vec<CoreState>,
    /// Run cores on the rayon pool instead of one after another.
    pub parallel: bool,
}

impl DeviceState {
    pub fn new(cfg: DeviceConfig, global_bytes: usize) -> Self {
        let cores = (0..cfg.num_cores)
            .map(|_| CoreState::new(cfg.local_mem_bytes))
            .collect();
        DeviceState {
            cfg,
            global: vec![0; global_bytes],
            cores,
            parallel: true,
        }
    }

    pub fn num_cores(&self) -> usize {
        self.cores.len()
    }

    pub fn core(&self, id: usize) -> &CoreState {
        &self.cores[id]
    }

    /// Grows global memory to at least `bytes`, zero-filled.
    pub fn ensure_global(&mut self, bytes: usize) {
        if self.global.len() < bytes {
            self.global.resize(bytes, 0);
        }
    }

    pub fn read_global(&self, addr: u64, len: usize) -> Result<&[u8], VmError> {
        let end = addr as usize + len;
        self.global
            .get(addr as usize..end)
            .ok_or(VmError::OutOfBounds {
                space: "global",
                start: addr,
                end: end as u64,
                size: self.global.len() as u64,
            })
    }

    pub fn write_global(&mut self, addr: u64, bytes: &[u8]) -> Result<(), VmError> {
        let end = addr as usize + bytes.len();
        let size = self.global.len();
        self.global
            .get_mut(addr as usize..end)
            .ok_or(VmError::OutOfBounds {
                space: "global",
                start: addr,
                end: end as u64,
                size: size as u64,
            })?
            .copy_from_slice(bytes);
        Ok(())
    }
}

/// Tiles `[m*id, min(M, m*(id+1)))` with `m = ceil(M / block_dim)`.
pub fn tile_range(core_id: u32, total_tiles: u32, block_dim: u32) -> Range<u64> {
    let m = (total_tiles as u64).div_ceil(block_dim.max(1) as u64);
    let start = (m * core_id as u64).min(total_tiles as u64);
    let end = (m * (core_id as u64 + 1)).min(total_tiles as u64);
    start..end
}

/// Outcome of one core's walk over its tiles.
#[derive(Clone, Debug, Default)]
pub struct CoreRun {
    pub core: u32,
    pub tiles: Range<u64>,
    /// Global writes in program order, not yet applied.
    pub writes: Vec<(u64, Vec<u8>)>,
    pub histogram: BTreeMap<InstructionKind, u64>,
    pub bytes_moved: u64,
}

fn check_header(program: &BytecodeProgram, cores: usize) -> Result<(), VmError> {
    let h = &program.header;
    if h.block_dim == 0 || h.total_tiles == 0 {
        return Err(VmError::Exec(
            "header needs total_tiles and block_dim >= 1".into(),
        ));
    }
    if h.block_dim as usize > cores {
        return Err(VmError::TooManyCores {
            requested: h.block_dim,
            available: cores,
        });
    }
    if h.code_size as usize != program.body.len() {
        return Err(VmError::Exec(format!(
            "code_size {} disagrees with a {}-byte body",
            h.code_size,
            program.body.len()
        )));
    }
    Ok(())
}

fn run_tiles(
    core: &mut CoreState,
    id: u32,
    program: &BytecodeProgram,
    global: &[u8],
) -> Result<CoreRun, VmError> {
    let h = &program.header;
    let tiles = tile_range(id, h.total_tiles, h.block_dim);
    let mut run = CoreRun {
        core: id,
        tiles: tiles.clone(),
        ..CoreRun::default()
    };
    core.tags.clear();
    let mut ctx = exec::Ctx {
        local: &mut core.local,
        tags: &mut core.tags,
        global,
        writes: &mut run.writes,
        bytes_moved: &mut run.bytes_moved,
    };
    let mut counts = [0u64; 64];
    for tile in tiles {
        for rec in program.walk() {
            let (_, insn, _) = rec?;
            counts[insn.kind.id() as usize] += 1;
            exec::lookup(insn.kind)(&insn, tile, &mut ctx)?;
        }
    }
    run.histogram = InstructionKind::ALL
        .iter()
        .filter(|k| counts[k.id() as usize] > 0)
        .map(|&k| (k, counts[k.id() as usize]))
        .collect();
    Ok(run)
}

/// Runs core `core_id` of `program` against the current global memory without
/// applying its writes.
pub fn run_core(
    core_id: u32,
    program: &BytecodeProgram,
    device: &mut DeviceState,
) -> Result<CoreRun, VmError> {
    check_header(program, device.num_cores())?;
    if core_id >= program.header.block_dim {
        return Err(VmError::Exec(format!(
            "core {core_id} outside block_dim {}",
            program.header.block_dim
        )));
    }
    let DeviceState { global, cores, .. } = device;
    run_tiles(&mut cores[core_id as usize], core_id, program, global)
}

/// Aggregate counters of a functional dispatch.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DispatchStats {
    pub cores_used: u32,
    pub tiles: u64,
    pub histogram: BTreeMap<InstructionKind, u64>,
    pub global_bytes: u64,
}

impl DispatchStats {
    pub fn merge(&mut self, other: &DispatchStats) {
        self.cores_used = self.cores_used.max(other.cores_used);
        self.tiles += other.tiles;
        self.global_bytes += other.global_bytes;
        for (k, v) in &other.histogram {
            *self.histogram.entry(*k).or_default() += v;
        }
    }
}

fn check_conflicts(runs: &[CoreRun]) -> Result<(), VmError> {
    let mut spans: Vec<(u64, u64, u32)> = runs
        .iter()
        .flat_map(|r| {
            r.writes
                .iter()
                .map(move |(a, b)| (*a, *a + b.len() as u64, r.core))
        })
        .collect();
    spans.sort_unstable();
    // Track the furthest-reaching earlier span so nested overlaps are caught.
    let mut reach: Option<(u64, u32)> = None;
    for &(start, end, core) in &spans {
        if let Some((r_end, r_core)) = reach {
            if start < r_end && r_core != core {
                return Err(VmError::WriteConflict {
                    a: r_core.min(core),
                    b: r_core.max(core),
                    start,
                    end: end.min(r_end),
                });
            }
        }
        if reach.is_none_or(|(r_end, _)| end > r_end) {
            reach = Some((end, core));
        }
    }
    Ok(())
}

/// Runs every core of `program`, mapping program core `i` to device core
/// `core_offset + i`. Global reads see memory as it was before the dispatch;
/// writes are applied afterwards.
pub fn dispatch_at(
    program: &BytecodeProgram,
    device: &mut DeviceState,
    core_offset: usize,
) -> Result<DispatchStats, VmError> {
    let bd = program.header.block_dim as usize;
    check_header(program, device.num_cores().saturating_sub(core_offset))?;
    let parallel = device.parallel;
    let DeviceState { global, cores, .. } = device;
    let slots = &mut cores[core_offset..core_offset + bd];
    let snapshot: &[u8] = global;
    let runs: Vec<CoreRun> = if parallel {
        slots
            .par_iter_mut()
            .enumerate()
            .map(|(id, c)| run_tiles(c, id as u32, program, snapshot))
            .collect::<Result<_, _>>()?
    } else {
        slots
            .iter_mut()
            .enumerate()
            .map(|(id, c)| run_tiles(c, id as u32, program, snapshot))
            .collect::<Result<_, _>>()?
    };
    check_conflicts(&runs)?;
    let mut stats = DispatchStats {
        cores_used: bd as u32,
        ..DispatchStats::default()
    };
    for run in &runs {
        for (addr, bytes) in &run.writes {
            device.write_global(*addr, bytes)?;
        }
        stats.tiles += run.tiles.end - run.tiles.start;
        stats.global_bytes += run.bytes_moved;
        for (k, v) in &run.histogram {
            *stats.histogram.entry(*k).or_default() += v;
        }
    }
    Ok(stats)
}

/// Runs `program` on cores `0..block_dim`.
pub fn dispatch(
    program: &BytecodeProgram,
    device: &mut DeviceState,
) -> Result<DispatchStats, VmError> {
    dispatch_at(program, device, 0)
}
