use std::collections::{BTreeMap, HashMap};
use std::sync::mpsc;
use std::thread;

use crate::error::{Error, GraphError, VmError};
use crate::format::{
    apply_op, declare_input, tensor_value, DimSpec, GraphFile, SymbolSpec, TensorSpec, TraceEvent,
};
use crate::fuser::{FlushReason, Flushed, FuseOptions, FusionBuffer};
use crate::graph::{GraphBuilder, OperatorGraph, TensorId};
use crate::isa::BytecodeProgram;
use crate::oracle::RefTensor;
use crate::tiler::DeviceConfig;
use crate::vm::{DeviceState, ExecutionStats};

use super::{
    check_against_oracle, compile_kernel, launch_kernel, pack_tensor, unpack_tensor, Allocator,
    GroupReport, Mode, RunOptions, RunReport, TensorReport,
};

/// Replays a graph file as a trace: bindings, inputs, ops, a host read of
/// each declared output, end.
pub fn graph_to_trace(file: &GraphFile) -> Vec<TraceEvent> {
    let mut ev: Vec<TraceEvent> = file
        .symbols
        .values
        .iter()
        .map(|(s, &v)| TraceEvent::Bind {
            sym: s.clone(),
            value: v,
        })
        .collect();
    ev.extend(file.tensors.iter().cloned().map(TraceEvent::Input));
    ev.extend(file.ops.iter().cloned().map(TraceEvent::Op));
    ev.extend(
        file.outputs
            .iter()
            .map(|t| TraceEvent::HostRead { tensor: t.clone() }),
    );
    ev.push(TraceEvent::End);
    ev
}

/// The whole-program graph a trace records; host reads become outputs.
pub fn trace_to_graph(events: &[TraceEvent]) -> GraphFile {
    let mut file = GraphFile {
        symbols: SymbolSpec::default(),
        ..GraphFile::default()
    };
    for e in events {
        match e {
            TraceEvent::Input(t) => file.tensors.push(t.clone()),
            TraceEvent::Bind { sym, value } => {
                file.symbols.values.insert(sym.clone(), *value);
            }
            TraceEvent::Op(op) => file.ops.push(op.clone()),
            TraceEvent::HostRead { tensor } => {
                if !file.outputs.contains(tensor) {
                    file.outputs.push(tensor.clone());
                }
            }
            TraceEvent::Branch { .. } => {}
            TraceEvent::End => break,
        }
    }
    file
}

enum Job {
    Write {
        addr: u64,
        bytes: Vec<u8>,
        end: u64,
    },
    Run {
        program: BytecodeProgram,
        end: u64,
    },
    Read {
        addr: u64,
        len: usize,
        reply: mpsc::Sender<Result<Vec<u8>, Error>>,
    },
}

/// Device-side loop: applies jobs in order, stops executing after the first
/// error but keeps answering reads.
fn executor(
    cfg: DeviceConfig,
    parallel: bool,
    jobs: mpsc::Receiver<Job>,
) -> Result<Vec<ExecutionStats>, Error> {
    let mut device = DeviceState::new(cfg, 0);
    device.parallel = parallel;
    let mut runs = Vec::new();
    let mut failed: Option<Error> = None;
    for job in jobs {
        match job {
            Job::Write { addr, bytes, end } if failed.is_none() => {
                device.ensure_global(end as usize);
                if let Err(e) = device.write_global(addr, &bytes) {
                    failed = Some(e.into());
                }
            }
            Job::Run { program, end } if failed.is_none() => {
                device.ensure_global(end as usize);
                let bd = program.header.block_dim as usize;
                match launch_kernel(&mut device, &program, 0, bd) {
                    Ok(s) => runs.push(s),
                    Err(e) => failed = Some(e),
                }
            }
            Job::Read { addr, len, reply } => {
                let r = match &failed {
                    Some(e) => Err(VmError::Exec(format!("device failed earlier: {e}")).into()),
                    None => device
                        .read_global(addr, len)
                        .map(<[u8]>::to_vec)
                        .map_err(Error::from),
                };
                let _ = reply.send(r);
            }
            _ => {}
        }
    }
    match failed {
        Some(e) => Err(e),
        None => Ok(runs),
    }
}

/// Host-side replay state.
struct Session<'a> {
    cfg: &'a DeviceConfig,
    seed: u64,
    jobs: mpsc::Sender<Job>,
    builder: GraphBuilder,
    graph: OperatorGraph,
    alloc: Allocator,
    bindings: BTreeMap<String, usize>,
    /// Declared inputs not yet used, with their seed.
    pending: HashMap<String, (TensorSpec, u64)>,
    inputs: HashMap<String, RefTensor<f64>>,
    resident: HashMap<String, bool>,
    /// Event index of each tensor's last read; `usize::MAX` for sinks.
    last: HashMap<String, usize>,
    groups: Vec<GroupReport>,
    compile_times: Vec<std::time::Duration>,
}

impl Session<'_> {
    fn live(&self, pos: usize) -> impl Fn(TensorId) -> bool + '_ {
        move |t| {
            self.last
                .get(&self.graph.tensor(t).name)
                .is_some_and(|&u| u >= pos)
        }
    }

    fn declare(&mut self, name: &str) -> Result<(), Error> {
        if self.builder.find(name).is_some() {
            return Ok(());
        }
        let (spec, seed) = self
            .pending
            .remove(name)
            .ok_or_else(|| GraphError::UnknownTensor(name.to_string()))?;
        let shape: Vec<usize> = spec
            .shape
            .iter()
            .map(|d| match d {
                DimSpec::Extent(n) => Ok(*n),
                DimSpec::Symbol(s) => self
                    .bindings
                    .get(s)
                    .copied()
                    .ok_or_else(|| GraphError::Unbound(s.clone())),
            })
            .collect::<Result<_, _>>()?;
        let concrete = TensorSpec {
            shape: shape.iter().map(|&n| DimSpec::Extent(n)).collect(),
            ..spec.clone()
        };
        declare_input(&mut self.builder, &concrete)?;
        let value = tensor_value(&spec, spec.dtype, shape, seed)?;
        self.inputs.insert(name.to_string(), value);
        Ok(())
    }

    fn upload(&mut self, t: TensorId) -> Result<(), Error> {
        let meta = self.graph.tensor(t).clone();
        if self.resident.get(&meta.name).copied().unwrap_or(false) {
            return Ok(());
        }
        let bytes = pack_tensor(&meta, &self.inputs[&meta.name])?;
        let addr = self.alloc.alloc(&meta)?;
        self.send(Job::Write {
            addr,
            bytes,
            end: self.alloc.end(),
        })?;
        self.resident.insert(meta.name, true);
        Ok(())
    }

    fn send(&self, job: Job) -> Result<(), Error> {
        self.jobs
            .send(job)
            .map_err(|_| VmError::Exec("device executor stopped".into()).into())
    }

    fn emit(&mut self, flushed: Vec<Flushed>) -> Result<(), Error> {
        for f in flushed {
            for t in f.group.inputs(&self.graph) {
                if self.graph.producer(t).is_none() {
                    self.upload(t)?;
                }
            }
            let k = compile_kernel(&self.graph, &f.group, &mut self.alloc, self.cfg)?;
            for &t in &f.group.outputs {
                self.resident
                    .insert(self.graph.tensor(t).name.clone(), true);
            }
            self.send(Job::Run {
                program: k.compiled.program.clone(),
                end: self.alloc.end(),
            })?;
            self.groups
                .push(GroupReport::new(&k, Some(f.reason.name())));
            self.compile_times.push(k.compile_time);
        }
        Ok(())
    }

    fn read(&mut self, name: &str) -> Result<RefTensor<f64>, Error> {
        if let Some(v) = self.inputs.get(name) {
            return Ok(v.clone());
        }
        let id = self
            .graph
            .find(name)
            .ok_or_else(|| GraphError::UnknownTensor(name.to_string()))?;
        let meta = self.graph.tensor(id).clone();
        let addr = self
            .alloc
            .addr(name)
            .ok_or_else(|| VmError::Exec(format!("tensor `{name}` was never stored")))?;
        let (tx, rx) = mpsc::channel();
        self.send(Job::Read {
            addr,
            len: meta.footprint_bytes()?,
            reply: tx,
        })?;
        let bytes = rx
            .recv()
            .map_err(|_| VmError::Exec("device executor stopped".into()))??;
        unpack_tensor(&meta, &bytes)
    }
}

fn last_reads(events: &[TraceEvent]) -> HashMap<String, usize> {
    let mut last = HashMap::new();
    for (i, e) in events.iter().enumerate() {
        match e {
            TraceEvent::Op(op) => {
                for t in &op.inputs {
                    last.insert(t.clone(), i);
                }
            }
            TraceEvent::HostRead { tensor } => {
                last.insert(tensor.clone(), i);
            }
            _ => {}
        }
    }
    for e in events {
        if let TraceEvent::Op(op) = e {
            last.entry(op.out.clone()).or_insert(usize::MAX);
        }
    }
    last
}

/// Replays `events` through a streaming fusion buffer; flushed groups are
/// compiled here and executed in order on a device thread.
pub fn run_stream(
    events: &[TraceEvent],
    cfg: &DeviceConfig,
    opts: &RunOptions,
) -> Result<RunReport, Error> {
    cfg.validate()?;
    let fuse = FuseOptions {
        capacity: if opts.fuse {
            crate::fuser::DEFAULT_CAPACITY
        } else {
            1
        },
        device: Some(cfg.clone()),
    };
    let (tx, rx) = mpsc::channel();
    thread::scope(|scope| {
        let device = scope.spawn(|| executor(cfg.clone(), opts.parallel, rx));
        let mut s = Session {
            cfg,
            seed: opts.seed,
            jobs: tx,
            builder: GraphBuilder::new(),
            graph: GraphBuilder::new().build(),
            alloc: Allocator::default(),
            bindings: BTreeMap::new(),
            pending: HashMap::new(),
            inputs: HashMap::new(),
            resident: HashMap::new(),
            last: last_reads(events),
            groups: Vec::new(),
            compile_times: Vec::new(),
        };
        let replayed = replay(&mut s, events, fuse);
        let Session {
            jobs,
            graph,
            inputs,
            groups,
            compile_times,
            ..
        } = s;
        drop(jobs);
        let runs = device.join().expect("device thread panicked");
        let (host_reads, outputs, branches) = replayed?;
        let runs = runs?;
        let launches = runs.len();
        let mut stats = runs
            .into_iter()
            .reduce(ExecutionStats::followed_by)
            .unwrap_or_else(|| ExecutionStats {
                decode_hidden: true,
                ..ExecutionStats::default()
            });
        stats.launches = launches as u32;
        let check = if opts.check {
            let mut all = host_reads.clone();
            all.extend(outputs.iter().cloned());
            Some(check_against_oracle(&graph, &inputs, &all)?)
        } else {
            None
        };
        let values = host_reads.iter().chain(&outputs).cloned().collect();
        Ok(RunReport {
            mode: Mode::Stream,
            seed: opts.seed,
            launches: groups
                .iter()
                .map(|g| format!("single[{}]", g.label))
                .collect(),
            groups,
            stats,
            host_reads: host_reads
                .iter()
                .map(|(n, v)| TensorReport::new(n, v))
                .collect(),
            outputs: outputs
                .iter()
                .map(|(n, v)| TensorReport::new(n, v))
                .collect(),
            branches,
            check,
            compile_times,
            values,
        })
    })
}

type Replayed = (
    Vec<(String, RefTensor<f64>)>,
    Vec<(String, RefTensor<f64>)>,
    Vec<bool>,
);

fn replay(s: &mut Session, events: &[TraceEvent], fuse: FuseOptions) -> Result<Replayed, Error> {
    let mut buf = FusionBuffer::new(fuse);
    let mut host_reads = Vec::new();
    let mut branches = Vec::new();
    let mut inputs_seen = 0u64;
    let mut end = events.len();
    for (pos, e) in events.iter().enumerate() {
        match e {
            TraceEvent::Input(spec) => {
                if s.pending.contains_key(&spec.id) || s.builder.find(&spec.id).is_some() {
                    return Err(GraphError::MultipleWriters(spec.id.clone()).into());
                }
                let seed = s.seed.wrapping_add(inputs_seen);
                inputs_seen += 1;
                s.pending.insert(spec.id.clone(), (spec.clone(), seed));
            }
            TraceEvent::Bind { sym, value } => {
                s.bindings.insert(sym.clone(), *value);
            }
            TraceEvent::Op(op) => {
                for name in &op.inputs {
                    s.declare(name)?;
                }
                let first = s.builder.snapshot().ops.len();
                apply_op(&mut s.builder, op)?;
                s.graph = s.builder.snapshot();
                for j in first..s.graph.ops.len() {
                    let flushed = buf.push_op(&s.graph, j, &s.live(pos));
                    s.emit(flushed)?;
                }
            }
            TraceEvent::HostRead { tensor } => {
                let flushed = buf.flush(&s.graph, FlushReason::HostRead, &s.live(pos));
                s.emit(flushed)?;
                if s.pending.contains_key(tensor) {
                    s.declare(tensor)?;
                }
                let v = s.read(tensor)?;
                host_reads.push((tensor.clone(), v));
            }
            TraceEvent::Branch { taken } => branches.push(*taken),
            TraceEvent::End => {
                end = pos;
                break;
            }
        }
    }
    let flushed = buf.flush(&s.graph, FlushReason::EndOfStream, &s.live(end));
    s.emit(flushed)?;
    let sinks: Vec<String> = s
        .graph
        .produced()
        .into_iter()
        .map(|t| s.graph.tensor(t).name.clone())
        .filter(|n| s.last.get(n) == Some(&usize::MAX))
        .collect();
    let mut outputs = Vec::new();
    for n in sinks {
        let v = s.read(&n)?;
        outputs.push((n, v));
    }
    Ok((host_reads, outputs, branches))
}
