//! Host side of the simulated device: memory binding, compilation of fused
//! groups, stacked dispatch, and end-to-end runs of graph and trace files.

mod stream;

pub use stream::{graph_to_trace, run_stream, trace_to_graph};

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::encoder::{compile_group, CompiledKernel};
use crate::error::{Error, GraphError, VmError};
use crate::format::GraphFile;
use crate::fuser::{
    fuse_static, group_dependencies, plan_stacking, sequential_plan, singleton_groups, FuseOptions,
    FusedGroup, GroupKind, StackPlan,
};
use crate::graph::{OpKind, OperatorGraph, TensorId, TensorMeta};
use crate::isa::BytecodeProgram;
use crate::oracle::{compare, ref_execute, RefTensor, Tolerance};
use crate::scalar::Dtype;
use crate::tiler::{tile_group, DeviceConfig};
use crate::vm::{dispatch_at, simulate_timing, DeviceState, ExecutionStats};

const ALIGN: u64 = 64;

/// Bump allocator of global addresses, keyed by tensor name.
#[derive(Clone, Debug, Default)]
pub struct Allocator {
    next: u64,
    addrs: HashMap<String, u64>,
}

impl Allocator {
    pub fn addr(&self, name: &str) -> Option<u64> {
        self.addrs.get(name).copied()
    }

    /// Address of `meta`, reserving its footprint on first request.
    pub fn alloc(&mut self, meta: &TensorMeta) -> Result<u64, GraphError> {
        if let Some(a) = self.addr(&meta.name) {
            return Ok(a);
        }
        let a = self.next;
        self.next = (a + meta.footprint_bytes()? as u64).next_multiple_of(ALIGN);
        self.addrs.insert(meta.name.clone(), a);
        Ok(a)
    }

    /// One past the highest reserved byte.
    pub fn end(&self) -> u64 {
        self.next
    }
}

/// Bytes of `value` laid out by `meta`'s strides, covering its footprint.
pub fn pack_tensor(meta: &TensorMeta, value: &RefTensor<f64>) -> Result<Vec<u8>, Error> {
    let shape = meta.concrete_shape()?;
    if shape != value.shape {
        return Err(Error::Parse(format!(
            "tensor `{}` has shape {:?} but its data has shape {:?}",
            meta.name, shape, value.shape
        )));
    }
    let mut bytes = vec![0u8; meta.footprint_bytes()?];
    let eb = meta.dtype.bytes();
    for (i, off) in element_offsets(&shape, &meta.element_strides()?).enumerate() {
        meta.dtype.write(&mut bytes[off * eb..], value.data[i]);
    }
    Ok(bytes)
}

/// Inverse of [`pack_tensor`].
pub fn unpack_tensor(meta: &TensorMeta, bytes: &[u8]) -> Result<RefTensor<f64>, Error> {
    let shape = meta.concrete_shape()?;
    let eb = meta.dtype.bytes();
    let data = element_offsets(&shape, &meta.element_strides()?)
        .map(|off| meta.dtype.read(&bytes[off * eb..]))
        .collect();
    Ok(RefTensor::new(meta.dtype, shape, data).expect("shape and data agree"))
}

/// Element offsets of a strided tensor in row-major logical order.
fn element_offsets<'a>(
    shape: &'a [usize],
    strides: &'a [usize],
) -> impl Iterator<Item = usize> + 'a {
    let n: usize = shape.iter().product();
    (0..n).map(move |mut i| {
        let mut off = 0;
        for (&d, &s) in shape.iter().zip(strides).rev() {
            off += (i % d) * s;
            i /= d;
        }
        off
    })
}

/// A compiled fused group and how it was tiled.
#[derive(Clone, Debug)]
pub struct Kernel {
    pub group: FusedGroup,
    pub label: String,
    pub compiled: CompiledKernel,
    pub tiles: usize,
    pub tile_elems: usize,
    pub tail: usize,
    /// Wall time spent tiling and encoding.
    pub compile_time: Duration,
}

/// Tiles and encodes `group` of the concrete graph `g`, reserving global
/// memory for everything it reads or stores.
pub fn compile_kernel(
    g: &OperatorGraph,
    group: &FusedGroup,
    alloc: &mut Allocator,
    cfg: &DeviceConfig,
) -> Result<Kernel, Error> {
    let mut sub = group.subgraph(g);
    let bound: Vec<TensorId> = group
        .inputs(g)
        .into_iter()
        .chain(group.outputs.iter().copied())
        .collect();
    for t in bound {
        let a = alloc.alloc(g.tensor(t))?;
        sub.tensor_mut(t).addr = Some(a);
    }
    let start = Instant::now();
    let tg = tile_group(&sub, cfg)?;
    let compiled = compile_group(&tg, cfg)?;
    let compile_time = start.elapsed();
    Ok(Kernel {
        label: group.label(g),
        group: group.clone(),
        compiled,
        tiles: tg.tiles,
        tile_elems: tg.tile_elems,
        tail: tg.tail,
        compile_time,
    })
}

/// `program` restricted to `block_dim` cores.
pub fn with_block_dim(program: &BytecodeProgram, block_dim: usize) -> BytecodeProgram {
    let mut p = program.clone();
    p.header.block_dim = block_dim as u32;
    p
}

/// Runs one kernel on cores `first..first + block_dim` and models its timing.
pub fn launch_kernel(
    device: &mut DeviceState,
    program: &BytecodeProgram,
    first: usize,
    block_dim: usize,
) -> Result<ExecutionStats, Error> {
    let p = with_block_dim(program, block_dim);
    dispatch_at(&p, device, first)?;
    Ok(simulate_timing(&p, &device.cfg)?)
}

fn fold(
    stats: Vec<ExecutionStats>,
    combine: fn(ExecutionStats, ExecutionStats) -> ExecutionStats,
) -> ExecutionStats {
    stats
        .into_iter()
        .reduce(combine)
        .unwrap_or_else(|| ExecutionStats {
            decode_hidden: true,
            ..ExecutionStats::default()
        })
}

/// The simulated device plus its global-memory allocator.
pub struct Runtime {
    pub cfg: DeviceConfig,
    pub device: DeviceState,
    pub alloc: Allocator,
}

impl Runtime {
    pub fn new(cfg: DeviceConfig) -> Result<Runtime, Error> {
        cfg.validate()?;
        Ok(Runtime {
            device: DeviceState::new(cfg.clone(), 0),
            cfg,
            alloc: Allocator::default(),
        })
    }

    /// Reserves and writes `value` for tensor `meta`.
    pub fn write_tensor(&mut self, meta: &TensorMeta, value: &RefTensor<f64>) -> Result<(), Error> {
        let bytes = pack_tensor(meta, value)?;
        let a = self.alloc.alloc(meta)?;
        self.device.ensure_global(self.alloc.end() as usize);
        self.device.write_global(a, &bytes)?;
        Ok(())
    }

    pub fn read_tensor(&self, meta: &TensorMeta) -> Result<RefTensor<f64>, Error> {
        let a = self
            .alloc
            .addr(&meta.name)
            .ok_or_else(|| VmError::Exec(format!("tensor `{}` is not resident", meta.name)))?;
        let bytes = self.device.read_global(a, meta.footprint_bytes()?)?;
        unpack_tensor(meta, bytes)
    }

    pub fn compile(&mut self, g: &OperatorGraph, group: &FusedGroup) -> Result<Kernel, Error> {
        let k = compile_kernel(g, group, &mut self.alloc, &self.cfg)?;
        self.device.ensure_global(self.alloc.end() as usize);
        Ok(k)
    }

    /// Dispatches `kernels` following `plan`; stages of a launch run back to
    /// back, kernels of a stage side by side.
    pub fn execute(
        &mut self,
        plan: &StackPlan,
        kernels: &[Kernel],
    ) -> Result<ExecutionStats, Error> {
        let mut launches = Vec::with_capacity(plan.launches.len());
        for launch in &plan.launches {
            let mut stages = Vec::with_capacity(launch.stages.len());
            for stage in &launch.stages {
                let mut slots = Vec::with_capacity(stage.kernels.len());
                for slot in &stage.kernels {
                    let program = &kernels[slot.kernel].compiled.program;
                    slots.push(launch_kernel(
                        &mut self.device,
                        program,
                        slot.cores.start,
                        slot.block_dim(),
                    )?);
                }
                stages.push(fold(slots, ExecutionStats::alongside));
            }
            launches.push(fold(stages, ExecutionStats::followed_by));
        }
        let mut total = fold(launches, ExecutionStats::followed_by);
        total.launches = plan.launches.len() as u32;
        Ok(total)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Static,
    Stream,
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub mode: Mode,
    pub seed: u64,
    pub check: bool,
    /// Pattern fusion; singleton groups when false.
    pub fuse: bool,
    /// Stacking of independent kernels; one launch per kernel when false.
    pub stack: bool,
    pub parallel: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            mode: Mode::Static,
            seed: 0,
            check: false,
            fuse: true,
            stack: true,
            parallel: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupReport {
    pub label: String,
    pub kind: GroupKind,
    /// Why a streaming buffer emitted the group.
    pub flushed_by: Option<&'static str>,
    pub tiles: usize,
    pub tile_elems: usize,
    pub tail: usize,
    pub instructions: Vec<String>,
}

impl GroupReport {
    fn new(k: &Kernel, flushed_by: Option<&'static str>) -> GroupReport {
        GroupReport {
            label: k.label.clone(),
            kind: k.group.kind,
            flushed_by,
            tiles: k.tiles,
            tile_elems: k.tile_elems,
            tail: k.tail,
            instructions: k
                .compiled
                .body
                .iter()
                .map(|i| i.kind.mnemonic().to_string())
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorReport {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub sum: f64,
    /// At most the first eight elements.
    pub head: Vec<f64>,
}

impl TensorReport {
    fn new(name: &str, t: &RefTensor<f64>) -> TensorReport {
        TensorReport {
            name: name.to_string(),
            dtype: t.dtype,
            shape: t.shape.clone(),
            sum: t.data.iter().sum(),
            head: t.data.iter().take(8).copied().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub pass: bool,
    pub max_abs_error: f64,
    pub mismatches: usize,
    pub rel_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub pass: bool,
    pub max_abs_error: f64,
    pub tensors: Vec<TensorCheck>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub mode: Mode,
    pub seed: u64,
    pub groups: Vec<GroupReport>,
    pub launches: Vec<String>,
    pub stats: ExecutionStats,
    pub host_reads: Vec<TensorReport>,
    pub outputs: Vec<TensorReport>,
    pub branches: Vec<bool>,
    pub check: Option<CheckReport>,
    #[serde(skip)]
    pub compile_times: Vec<Duration>,
    #[serde(skip)]
    pub values: HashMap<String, RefTensor<f64>>,
}

impl RunReport {
    /// Deterministic text rendering.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mode = match self.mode {
            Mode::Static => "static",
            Mode::Stream => "stream",
        };
        let _ = writeln!(s, "mode={mode} seed={}", self.seed);
        for (i, g) in self.groups.iter().enumerate() {
            let _ = write!(
                s,
                "group {i}: {} tiles={} tile={} tail={}",
                g.label, g.tiles, g.tile_elems, g.tail
            );
            if let Some(r) = g.flushed_by {
                let _ = write!(s, " flushed_by={r}");
            }
            let _ = writeln!(s);
        }
        for l in &self.launches {
            let _ = writeln!(s, "launch {l}");
        }
        for b in &self.branches {
            let _ = writeln!(s, "branch taken={b}");
        }
        for (tag, list) in [("host_read", &self.host_reads), ("output", &self.outputs)] {
            for t in list {
                let _ = writeln!(
                    s,
                    "{tag} {} {} {:?} sum={:.6e} head={:?}",
                    t.name, t.dtype, t.shape, t.sum, t.head
                );
            }
        }
        let st = &self.stats;
        let _ = writeln!(
            s,
            "stats makespan={:.3} zero_decode_makespan={:.3} decode_hidden={} launches={} global_bytes={}",
            st.makespan, st.zero_decode_makespan, st.decode_hidden, st.launches, st.global_bytes
        );
        if let Some(c) = &self.check {
            for t in &c.tensors {
                let _ = writeln!(
                    s,
                    "check {} {} max_abs_error={:.3e} mismatches={} rel_tol={:e}",
                    t.name,
                    if t.pass { "PASS" } else { "FAIL" },
                    t.max_abs_error,
                    t.mismatches,
                    t.rel_tol
                );
            }
            let _ = writeln!(
                s,
                "check {} max_abs_error={:.3e}",
                if c.pass { "PASS" } else { "FAIL" },
                c.max_abs_error
            );
        }
        s
    }
}

/// Tolerance for comparing tensor `t` against the oracle: exact unless the
/// value is f16 or depends on a reduction (1e-3) or a matmul (1e-5). Inexact
/// tolerances get an absolute floor of `rel * max|expected|`.
pub fn check_tolerance(g: &OperatorGraph, t: TensorId, expected: &RefTensor<f64>) -> Tolerance {
    let mut reduce = false;
    let mut matmul = false;
    let mut f16 = false;
    let mut seen = HashSet::new();
    let mut stack = vec![t];
    while let Some(x) = stack.pop() {
        if !seen.insert(x) {
            continue;
        }
        f16 |= g.tensor(x).dtype == Dtype::F16;
        if let Some(p) = g.producer(x) {
            let op = &g.ops[p];
            reduce |= op.kind.is_reduction();
            matmul |= matches!(op.kind, OpKind::Matmul);
            stack.extend(&op.inputs);
        }
    }
    let rel = if f16 || reduce {
        1e-3
    } else if matmul {
        1e-5
    } else {
        return Tolerance::EXACT;
    };
    let scale = expected
        .data
        .iter()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    Tolerance {
        rel,
        abs: rel * scale,
    }
}

/// Compares `actual` values against the oracle run of `g` on `inputs`.
pub fn check_against_oracle(
    g: &OperatorGraph,
    inputs: &HashMap<String, RefTensor<f64>>,
    actual: &[(String, RefTensor<f64>)],
) -> Result<CheckReport, Error> {
    let expected = ref_execute(g, inputs).map_err(|e| Error::Parse(e.to_string()))?;
    let mut report = CheckReport {
        pass: true,
        max_abs_error: 0.0,
        tensors: Vec::new(),
    };
    for (name, a) in actual {
        let Some(e) = expected.get(name).or_else(|| inputs.get(name)) else {
            continue;
        };
        let id = g
            .find(name)
            .ok_or_else(|| GraphError::UnknownTensor(name.clone()))?;
        let tol = check_tolerance(g, id, e);
        let (pass, max_abs_error, mismatches) = match compare(a, e, tol) {
            Ok(r) => (r.pass, r.max_abs_error, r.mismatches),
            Err(_) => (false, f64::INFINITY, a.numel()),
        };
        report.pass &= pass;
        report.max_abs_error = report.max_abs_error.max(max_abs_error);
        report.tensors.push(TensorCheck {
            name: name.clone(),
            pass,
            max_abs_error,
            mismatches,
            rel_tol: tol.rel,
        });
    }
    Ok(report)
}

/// Declared outputs, or tensors produced and never read when none are declared.
pub fn result_tensors(g: &OperatorGraph) -> Vec<TensorId> {
    if !g.outputs.is_empty() {
        return g.outputs.clone();
    }
    let read = g.last_uses();
    g.produced()
        .into_iter()
        .filter(|t| !read.contains_key(t))
        .collect()
}

/// Fuses, compiles and runs a whole graph at once.
pub fn run_graph(
    file: &GraphFile,
    cfg: &DeviceConfig,
    opts: &RunOptions,
) -> Result<RunReport, Error> {
    if opts.mode == Mode::Stream {
        let trace = graph_to_trace(file);
        return run_stream(&trace, cfg, opts);
    }
    let (g, data) = file.build(opts.seed)?;
    let inputs = data.materialize(&g.concretize()?)?;
    run_static(&g, &inputs, cfg, opts)
}

/// Static pipeline on a built graph whose symbols are all bound; `inputs`
/// are keyed by tensor name.
pub fn run_static(
    g: &OperatorGraph,
    inputs: &HashMap<String, RefTensor<f64>>,
    cfg: &DeviceConfig,
    opts: &RunOptions,
) -> Result<RunReport, Error> {
    // Static decisions see symbol facts only, not one instance's bindings.
    let mut symbolic = g.clone();
    symbolic.symbols.clear_bindings();
    let groups = if opts.fuse {
        fuse_static(
            &symbolic,
            &FuseOptions {
                device: Some(cfg.clone()),
                ..FuseOptions::default()
            },
        )
    } else {
        singleton_groups(g)
    };
    let gc = g.concretize()?;
    let mut rt = Runtime::new(cfg.clone())?;
    rt.device.parallel = opts.parallel;
    for t in gc.inputs() {
        let meta = gc.tensor(t);
        let value = inputs
            .get(&meta.name)
            .ok_or_else(|| Error::Parse(format!("input `{}` has no data", meta.name)))?;
        rt.write_tensor(meta, value)?;
    }
    let kernels: Vec<Kernel> = groups
        .iter()
        .map(|grp| rt.compile(&gc, grp))
        .collect::<Result<_, _>>()?;
    let tiles: Vec<usize> = kernels.iter().map(|k| k.tiles).collect();
    let plan = if opts.stack {
        plan_stacking(&tiles, &group_dependencies(&gc, &groups), cfg.num_cores)
    } else {
        sequential_plan(&tiles, cfg.num_cores)
    };
    let stats = rt.execute(&plan, &kernels)?;
    let mut values = HashMap::new();
    let mut read = Vec::new();
    for t in result_tensors(&gc) {
        let meta = gc.tensor(t);
        let v = rt.read_tensor(meta)?;
        read.push((meta.name.clone(), v.clone()));
        values.insert(meta.name.clone(), v);
    }
    let check = if opts.check {
        Some(check_against_oracle(&gc, inputs, &read)?)
    } else {
        None
    };
    Ok(RunReport {
        mode: Mode::Static,
        seed: opts.seed,
        groups: kernels.iter().map(|k| GroupReport::new(k, None)).collect(),
        launches: plan.describe(),
        stats,
        host_reads: Vec::new(),
        outputs: read.iter().map(|(n, v)| TensorReport::new(n, v)).collect(),
        branches: Vec::new(),
        check,
        compile_times: kernels.iter().map(|k| k.compile_time).collect(),
        values,
    })
}
