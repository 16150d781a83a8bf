//! Lowering of a tiled group to a bytecode program.

mod alloc;
mod sync;

pub use alloc::{Block, BufferKey, LocalAllocation};
pub use sync::{body_accesses, check_syncs, insert_syncs, Access, SYNC_EVENTS};

use std::collections::{HashMap, HashSet};

use alloc::FirstFit;

use crate::error::CompileError;
use crate::graph::{OpKind, TensorId, TensorMeta};
use crate::isa::{
    encode_program, Anchor, BytecodeProgram, Extras, InstructionKind as K, KernelType,
    ProgramHeader, ViewMode, ViewSpec, VirtualInstruction,
};
use crate::tiler::{DeviceConfig, MatmulTiling, TensorSpace, TiledGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Step {
    Load(TensorId),
    Slabs(usize),
    Matmul(usize),
    Op(usize),
    Store(TensorId),
}

struct Schedule {
    steps: Vec<Step>,
    alloc: LocalAllocation,
    inputs: Vec<TensorId>,
}

fn record(alloc: &mut LocalAllocation, key: BufferKey, block: Block) {
    alloc.blocks.insert(key, block);
}

fn schedule(tg: &TiledGraph) -> Schedule {
    let g = &tg.graph;
    let produced: HashSet<TensorId> = g.ops.iter().map(|op| op.output).collect();
    let last_use = g.last_uses();
    let outputs: HashSet<TensorId> = g.outputs.iter().copied().collect();
    let mut alloc = LocalAllocation::default();
    let mut steps = Vec::new();
    let mut inputs = Vec::new();

    let (mut ff, slot, first_chain_op) = match tg.matmul() {
        Some(mt) => {
            let ab = g.tensor(g.ops[0].inputs[0]).dtype.bytes();
            let a_len = mt.tm * mt.tk * ab;
            record(
                &mut alloc,
                BufferKey::SlabA,
                Block {
                    offset: 0,
                    len: a_len,
                },
            );
            record(
                &mut alloc,
                BufferKey::SlabB,
                Block {
                    offset: a_len,
                    len: mt.slab_bytes - a_len,
                },
            );
            let mut ff = FirstFit::with_base(mt.slab_bytes);
            let slot = tg.tile_elems * tg.elem_bytes;
            let c = g.ops[0].output;
            record(&mut alloc, BufferKey::Tensor(c), ff.alloc(slot));
            for j in 0..mt.k_chunks {
                steps.push(Step::Slabs(j));
                steps.push(Step::Matmul(j));
            }
            if outputs.contains(&c) {
                steps.push(Step::Store(c));
            }
            if !last_use.contains_key(&c) {
                ff.free(alloc.tensor(c).unwrap());
            }
            (ff, slot, 1)
        }
        None => (FirstFit::default(), tg.tile_elems * tg.elem_bytes, 0),
    };

    for (j, op) in g.ops.iter().enumerate().skip(first_chain_op) {
        let mut distinct: Vec<TensorId> = Vec::new();
        for &t in &op.inputs {
            if !distinct.contains(&t) {
                distinct.push(t);
            }
        }
        for &t in &distinct {
            if !produced.contains(&t) && alloc.tensor(t).is_none() {
                record(&mut alloc, BufferKey::Tensor(t), ff.alloc(slot));
                steps.push(Step::Load(t));
                inputs.push(t);
            }
        }
        record(&mut alloc, BufferKey::Tensor(op.output), ff.alloc(slot));
        steps.push(Step::Op(j));
        if outputs.contains(&op.output) {
            steps.push(Step::Store(op.output));
        }
        for &t in &distinct {
            if last_use.get(&t) == Some(&j) {
                ff.free(alloc.tensor(t).unwrap());
            }
        }
        if last_use.get(&op.output).is_none_or(|&u| u <= j) {
            ff.free(alloc.tensor(op.output).unwrap());
        }
    }
    alloc.high_water = ff.high_water;
    Schedule {
        steps,
        alloc,
        inputs,
    }
}

/// Places every tile buffer of `tg` in local memory.
pub fn allocate_local(
    tg: &TiledGraph,
    local_mem_bytes: usize,
) -> Result<LocalAllocation, CompileError> {
    let alloc = schedule(tg).alloc;
    if alloc.high_water > local_mem_bytes {
        return Err(CompileError::Allocation {
            need: alloc.high_water,
            have: local_mem_bytes,
        });
    }
    Ok(alloc)
}

/// A compiled group ready for dispatch.
#[derive(Clone, Debug, PartialEq)]
pub struct CompiledKernel {
    pub program: BytecodeProgram,
    pub body: Vec<VirtualInstruction>,
    pub alloc: LocalAllocation,
    /// External inputs, in load order.
    pub inputs: Vec<TensorId>,
    pub outputs: Vec<TensorId>,
}

impl CompiledKernel {
    pub fn kernel_type(&self) -> KernelType {
        self.program.header.kernel_type
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32, CompileError> {
    u32::try_from(v).map_err(|_| CompileError::Unsupported(format!("{what} {v} exceeds 32 bits")))
}

fn addr(t: &TensorMeta) -> Result<u64, CompileError> {
    t.addr.ok_or_else(|| CompileError::Unbound(t.name.clone()))
}

/// Element strides of `t` right-aligned to `view`, zero where `t` broadcasts.
fn view_strides(t: &TensorMeta, view: &[usize]) -> Result<Vec<u32>, CompileError> {
    let shape = t.concrete_shape()?;
    let strides = t.element_strides()?;
    let off = view.len() - shape.len();
    (0..view.len())
        .map(|d| {
            if d < off || shape[d - off] == 1 {
                Ok(0)
            } else {
                u32_of(strides[d - off], "stride")
            }
        })
        .collect()
}

struct Emitter<'a> {
    tg: &'a TiledGraph,
    alloc: &'a LocalAllocation,
}

impl Emitter<'_> {
    fn local(&self, t: TensorId) -> u64 {
        self.alloc
            .offset(BufferKey::Tensor(t))
            .expect("scheduled buffer")
    }

    fn meta(&self, t: TensorId) -> &TensorMeta {
        self.tg.graph.tensor(t)
    }

    /// `(tile_size, total_size)` of vector instructions producing into `space`.
    fn extent(&self, space: TensorSpace) -> Result<(u32, u32), CompileError> {
        match self.tg.matmul() {
            Some(_) => Ok((
                u32_of(self.tg.tile_elems, "tile")?,
                u32_of(self.tg.tile_elems * self.tg.tiles, "total")?,
            )),
            None => {
                let (tile, total) = self.tg.extent(space);
                Ok((u32_of(tile, "tile")?, u32_of(total, "total")?))
            }
        }
    }

    fn view_shape(&self, space: TensorSpace) -> Vec<usize> {
        let mut v = self.tg.dominant.clone();
        if space == TensorSpace::Reduced {
            *v.last_mut().unwrap() = 1;
        }
        v
    }

    fn grid(
        &self,
        mt: &MatmulTiling,
        dtype: crate::Dtype,
        sizes: [usize; 2],
        strides: Vec<u32>,
        extents: [usize; 2],
        anchors: [Anchor; 2],
    ) -> Result<ViewSpec, CompileError> {
        Ok(ViewSpec {
            dtype,
            mode: ViewMode::Grid {
                swizzle: mt.swizzle,
                rows: u32_of(mt.grid_rows, "grid rows")?,
                cols: u32_of(mt.grid_cols, "grid cols")?,
            },
            strides,
            sizes: vec![u32_of(sizes[0], "size")?, u32_of(sizes[1], "size")?],
            extents: vec![u32_of(extents[0], "extent")?, u32_of(extents[1], "extent")?],
            anchors: anchors.to_vec(),
        })
    }

    fn load(&self, t: TensorId) -> Result<VirtualInstruction, CompileError> {
        let meta = self.meta(t);
        let dst = self.local(t);
        let src = addr(meta)?;
        if let Some(mt) = self.tg.matmul() {
            let strides = view_strides(meta, &[mt.m, mt.n])?;
            let view = self.grid(
                mt,
                meta.dtype,
                [mt.tm, mt.tn],
                strides,
                [mt.m, mt.n],
                [Anchor::Row, Anchor::Col],
            )?;
            let (tile, total) = self.extent(TensorSpace::Full)?;
            return Ok(VirtualInstruction::new(
                K::ViewLoad,
                dst,
                vec![src],
                tile,
                total,
                Extras::View(view),
            ));
        }
        let space = self.tg.space(t);
        let view = self.view_shape(space);
        let (tile, total) = self.extent(space)?;
        if meta.concrete_shape()? == view && meta.is_contiguous() {
            return Ok(VirtualInstruction::new(
                K::Load,
                dst,
                vec![src],
                tile,
                total,
                Extras::Mem {
                    tile_stride: tile,
                    dtype: meta.dtype,
                },
            ));
        }
        let spec = ViewSpec {
            dtype: meta.dtype,
            mode: ViewMode::Flat,
            strides: view_strides(meta, &view)?,
            sizes: view
                .iter()
                .map(|&s| u32_of(s, "size"))
                .collect::<Result<_, _>>()?,
            extents: vec![],
            anchors: vec![],
        };
        Ok(VirtualInstruction::new(
            K::ViewLoad,
            dst,
            vec![src],
            tile,
            total,
            Extras::View(spec),
        ))
    }

    fn store(&self, t: TensorId) -> Result<VirtualInstruction, CompileError> {
        let meta = self.meta(t);
        let src = self.local(t);
        let dst = addr(meta)?;
        if let Some(mt) = self.tg.matmul() {
            let strides = vec![u32_of(mt.n, "stride")?, 1];
            let view = self.grid(
                mt,
                meta.dtype,
                [mt.tm, mt.tn],
                strides,
                [mt.m, mt.n],
                [Anchor::Row, Anchor::Col],
            )?;
            let (tile, total) = self.extent(TensorSpace::Full)?;
            return Ok(VirtualInstruction::new(
                K::ViewStore,
                dst,
                vec![src],
                tile,
                total,
                Extras::View(view),
            ));
        }
        let (tile, total) = self.extent(self.tg.space(t))?;
        Ok(VirtualInstruction::new(
            K::Store,
            dst,
            vec![src],
            tile,
            total,
            Extras::Mem {
                tile_stride: tile,
                dtype: meta.dtype,
            },
        ))
    }

    fn slabs(&self, mt: &MatmulTiling, j: usize) -> Result<[VirtualInstruction; 2], CompileError> {
        let op = &self.tg.graph.ops[0];
        let (a, b) = (self.meta(op.inputs[0]), self.meta(op.inputs[1]));
        let chunk = Anchor::Fixed(u32_of(j, "k chunk")?);
        let a_view = self.grid(
            mt,
            a.dtype,
            [mt.tm, mt.tk],
            view_strides(a, &[mt.m, mt.k])?,
            [mt.m, mt.k],
            [Anchor::Row, chunk],
        )?;
        let b_view = self.grid(
            mt,
            b.dtype,
            [mt.tk, mt.tn],
            view_strides(b, &[mt.k, mt.n])?,
            [mt.k, mt.n],
            [chunk, Anchor::Col],
        )?;
        let tiles = self.tg.tiles;
        let a_tile = mt.tm * mt.tk;
        let b_tile = mt.tk * mt.tn;
        Ok([
            VirtualInstruction::new(
                K::ViewLoad,
                self.alloc.offset(BufferKey::SlabA).unwrap(),
                vec![addr(a)?],
                u32_of(a_tile, "tile")?,
                u32_of(a_tile * tiles, "total")?,
                Extras::View(a_view),
            ),
            VirtualInstruction::new(
                K::ViewLoad,
                self.alloc.offset(BufferKey::SlabB).unwrap(),
                vec![addr(b)?],
                u32_of(b_tile, "tile")?,
                u32_of(b_tile * tiles, "total")?,
                Extras::View(b_view),
            ),
        ])
    }

    fn matmul(&self, mt: &MatmulTiling, j: usize) -> Result<VirtualInstruction, CompileError> {
        let op = &self.tg.graph.ops[0];
        let (tile, total) = self.extent(TensorSpace::Full)?;
        Ok(VirtualInstruction::new(
            K::Matmul,
            self.local(op.output),
            vec![
                self.alloc.offset(BufferKey::SlabA).unwrap(),
                self.alloc.offset(BufferKey::SlabB).unwrap(),
            ],
            tile,
            total,
            Extras::Matmul {
                m: u32_of(mt.tm, "m")?,
                k: u32_of(mt.tk, "k")?,
                n: u32_of(mt.tn, "n")?,
                accumulate: j > 0,
            },
        ))
    }

    fn op(&self, j: usize) -> Result<VirtualInstruction, CompileError> {
        let op = &self.tg.graph.ops[j];
        let srcs: Vec<u64> = op.inputs.iter().map(|&t| self.local(t)).collect();
        let dst = self.local(op.output);
        let out_space = self.tg.space(op.output);
        let (kind, extras, space) = match &op.kind {
            OpKind::Add => (K::Add, Extras::None, out_space),
            OpKind::Sub => (K::Sub, Extras::None, out_space),
            OpKind::Mul => (K::Mul, Extras::None, out_space),
            OpKind::Div => (K::Div, Extras::None, out_space),
            OpKind::Min => (K::Min, Extras::None, out_space),
            OpKind::Max => (K::Max, Extras::None, out_space),
            OpKind::Pow => (K::Pow, Extras::None, out_space),
            OpKind::Sqrt => (K::Sqrt, Extras::None, out_space),
            OpKind::Abs => (K::Abs, Extras::None, out_space),
            OpKind::Log => (K::Log, Extras::None, out_space),
            OpKind::Exp => (K::Exp, Extras::None, out_space),
            OpKind::Round => (K::Round, Extras::None, out_space),
            OpKind::Floor => (K::Floor, Extras::None, out_space),
            OpKind::IsFinite => (K::IsFinite, Extras::None, out_space),
            OpKind::Copy => (K::Copy, Extras::None, out_space),
            OpKind::Select => (K::Select, Extras::None, out_space),
            OpKind::Adds(s) => (K::Adds, Extras::Scalar(*s), out_space),
            OpKind::Muls(s) => (K::Muls, Extras::Scalar(*s), out_space),
            OpKind::Cmp(c) => (K::Cmp, Extras::Cmp(*c), out_space),
            OpKind::Cast(to) => (
                K::Cast,
                Extras::Cast {
                    from: self.meta(op.inputs[0]).dtype,
                    to: *to,
                },
                out_space,
            ),
            OpKind::Sum | OpKind::ReduceMax | OpKind::ReduceMin | OpKind::Broadcast(_) => {
                let kind = match op.kind {
                    OpKind::Sum => K::Sum,
                    OpKind::ReduceMax => K::ReduceMax,
                    OpKind::ReduceMin => K::ReduceMin,
                    _ => K::Broadcast,
                };
                let w = self.tg.row_width();
                let rows = self.tg.tile_elems / w;
                let extras = Extras::Shape3 {
                    m: u32_of(rows, "rows")?,
                    size: u32_of(w, "width")?,
                    n: 1,
                };
                (kind, extras, TensorSpace::Full)
            }
            OpKind::Matmul => {
                return Err(CompileError::Unsupported(
                    "matmul outside the group head".into(),
                ))
            }
        };
        let (tile, total) = self.extent(space)?;
        Ok(VirtualInstruction::new(
            kind, dst, srcs, tile, total, extras,
        ))
    }
}

/// Compiles a tiled group: loads, compute, stores and synchronization.
pub fn compile_group(tg: &TiledGraph, cfg: &DeviceConfig) -> Result<CompiledKernel, CompileError> {
    let sched = schedule(tg);
    if sched.alloc.high_water > cfg.local_mem_bytes {
        return Err(CompileError::Allocation {
            need: sched.alloc.high_water,
            have: cfg.local_mem_bytes,
        });
    }
    let em = Emitter {
        tg,
        alloc: &sched.alloc,
    };
    let mut raw = Vec::with_capacity(sched.steps.len());
    for step in &sched.steps {
        match *step {
            Step::Load(t) => raw.push(em.load(t)?),
            Step::Store(t) => raw.push(em.store(t)?),
            Step::Op(j) => raw.push(em.op(j)?),
            Step::Slabs(j) => raw.extend(em.slabs(tg.matmul().unwrap(), j)?),
            Step::Matmul(j) => raw.push(em.matmul(tg.matmul().unwrap(), j)?),
        }
    }
    let body = insert_syncs(&raw).map_err(CompileError::Unsupported)?;
    let kernel_type = match tg.matmul() {
        None => KernelType::Vector,
        Some(_) if tg.graph.ops.len() == 1 => KernelType::Cube,
        Some(_) => KernelType::CubeVector,
    };
    let tiles = u32_of(tg.tiles, "tiles")?;
    let block_dim = u32_of(cfg.num_cores.min(tg.tiles), "block_dim")?;
    let program = encode_program(ProgramHeader::new(kernel_type, tiles, block_dim), &body)?;
    let mut outputs: Vec<TensorId> = Vec::new();
    for step in &sched.steps {
        if let Step::Store(t) = step {
            outputs.push(*t);
        }
    }
    Ok(CompiledKernel {
        program,
        body,
        alloc: sched.alloc,
        inputs: sched.inputs,
        outputs,
    })
}

/// Loads, stores and compute instructions per kind, for reports and tests.
pub fn instruction_histogram(body: &[VirtualInstruction]) -> HashMap<K, usize> {
    let mut h = HashMap::new();
    for insn in body {
        *h.entry(insn.kind).or_insert(0) += 1;
    }
    h
}
