//! Pattern fusion of basic operators, the streaming fusion buffer, and
//! stacking of independent kernels.

mod stack;

pub use stack::{
    plan_stacking, sequential_plan, split_cores, KernelSlot, Launch, StackPlan, Stage,
    TEMPORAL_TILE_BUDGET,
};

use std::collections::{HashMap, HashSet};
use std::fmt;

use crate::graph::{BasicOp, OperatorGraph, SymDim, SymbolTable, TensorId};
use crate::tiler::{classify_spaces, tile_group, DeviceConfig};

/// Default number of ops a fusion buffer holds before it flushes.
pub const DEFAULT_CAPACITY: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupKind {
    VvPattern,
    CvPattern,
    Singleton,
}

impl GroupKind {
    pub fn name(self) -> &'static str {
        match self {
            GroupKind::VvPattern => "vv-pattern",
            GroupKind::CvPattern => "cv-pattern",
            GroupKind::Singleton => "singleton",
        }
    }
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ops (indices into the source graph, in order) compiled as one kernel, and
/// the produced tensors it must store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusedGroup {
    pub kind: GroupKind,
    pub ops: Vec<usize>,
    pub outputs: Vec<TensorId>,
}

impl FusedGroup {
    pub fn subgraph(&self, g: &OperatorGraph) -> OperatorGraph {
        g.subgraph(&self.ops, self.outputs.clone())
    }

    /// Tensors read by the group but produced outside it.
    pub fn inputs(&self, g: &OperatorGraph) -> Vec<TensorId> {
        let produced: HashSet<TensorId> = self.ops.iter().map(|&i| g.ops[i].output).collect();
        let mut out = Vec::new();
        for &i in &self.ops {
            for &t in &g.ops[i].inputs {
                if !produced.contains(&t) && !out.contains(&t) {
                    out.push(t);
                }
            }
        }
        out
    }

    /// `kind{op,op,...}`.
    pub fn label(&self, g: &OperatorGraph) -> String {
        let names: Vec<&str> = self.ops.iter().map(|&i| g.ops[i].kind.name()).collect();
        format!("{}{{{}}}", self.kind, names.join(","))
    }
}

/// Right-aligned unification where size-1 dims broadcast. `None` when some
/// pair is not provably equal.
fn merge_shapes(a: &[SymDim], b: &[SymDim], sym: &SymbolTable) -> Option<Vec<SymDim>> {
    let rank = a.len().max(b.len());
    let one = SymDim::Const(1);
    (0..rank)
        .map(|i| {
            let x = if i + a.len() >= rank {
                &a[i + a.len() - rank]
            } else {
                &one
            };
            let y = if i + b.len() >= rank {
                &b[i + b.len() - rank]
            } else {
                &one
            };
            if sym.dims_equal(x, y) || y.is_one() {
                Some(x.clone())
            } else if x.is_one() {
                Some(y.clone())
            } else {
                None
            }
        })
        .collect()
}

/// The space an op iterates over: its input for reductions, its output
/// otherwise.
pub fn iteration_space<'a>(g: &'a OperatorGraph, op: &BasicOp) -> &'a [SymDim] {
    if op.kind.is_reduction() {
        &g.tensor(op.inputs[0]).shape
    } else {
        &g.tensor(op.output).shape
    }
}

/// Whether two vector ops iterate over unifiable spaces under the graph's
/// symbol facts.
pub fn can_merge_iteration(a: &BasicOp, b: &BasicOp, g: &OperatorGraph) -> bool {
    if a.kind.is_matmul() || b.kind.is_matmul() {
        return false;
    }
    merge_shapes(iteration_space(g, a), iteration_space(g, b), &g.symbols).is_some()
}

#[derive(Clone, Debug)]
pub struct FuseOptions {
    pub capacity: usize,
    /// When set, a candidate group with concrete shapes must also tile on
    /// this device.
    pub device: Option<DeviceConfig>,
}

impl Default for FuseOptions {
    fn default() -> Self {
        FuseOptions {
            capacity: DEFAULT_CAPACITY,
            device: None,
        }
    }
}

#[derive(Clone, Debug)]
struct Open {
    ops: Vec<usize>,
    dominant: Vec<SymDim>,
    /// `[m, n]` of the seeding matmul.
    cube: Option<[SymDim; 2]>,
}

impl Open {
    fn start(g: &OperatorGraph, j: usize) -> Open {
        let op = &g.ops[j];
        let cube = op.kind.is_matmul().then(|| {
            let s = &g.tensor(op.output).shape;
            [s[0].clone(), s[1].clone()]
        });
        Open {
            ops: vec![j],
            dominant: iteration_space(g, op).to_vec(),
            cube,
        }
    }

    fn produces(&self, g: &OperatorGraph, t: TensorId) -> bool {
        self.ops.iter().any(|&i| g.ops[i].output == t)
    }

    /// New dominant shape if op `j` may join.
    fn try_extend(&self, g: &OperatorGraph, j: usize, opts: &FuseOptions) -> Option<Vec<SymDim>> {
        let op = &g.ops[j];
        if op.kind.is_matmul() {
            return None;
        }
        let consumes = op.inputs.iter().any(|&t| self.produces(g, t));
        let mut ops = self.ops.clone();
        ops.push(j);
        let dominant = match &self.cube {
            Some(mn) => {
                if !op.kind.is_elementwise() || !consumes {
                    return None;
                }
                if !g.symbols.shapes_equal(&g.tensor(op.output).shape, mn) {
                    return None;
                }
                let external_ok = op
                    .inputs
                    .iter()
                    .all(|&t| self.produces(g, t) || g.tensor(t).shape.len() <= 2);
                if !external_ok {
                    return None;
                }
                self.dominant.clone()
            }
            None => {
                let shares = op
                    .inputs
                    .iter()
                    .any(|t| self.ops.iter().any(|&i| g.ops[i].inputs.contains(t)));
                if !consumes && !shares {
                    return None;
                }
                let dominant = merge_shapes(&self.dominant, iteration_space(g, op), &g.symbols)?;
                classify_spaces(g, &ops, &dominant).ok()?;
                dominant
            }
        };
        if let Some(cfg) = &opts.device {
            if let Ok(concrete) = g.subgraph(&ops, Vec::new()).concretize() {
                tile_group(&concrete, cfg).ok()?;
            }
        }
        Some(dominant)
    }

    fn close(self, g: &OperatorGraph, live: &dyn Fn(TensorId) -> bool) -> FusedGroup {
        let kind = match (self.cube.is_some(), self.ops.len()) {
            (_, 1) => GroupKind::Singleton,
            (true, _) => GroupKind::CvPattern,
            (false, _) => GroupKind::VvPattern,
        };
        let mut outputs: Vec<TensorId> = self
            .ops
            .iter()
            .map(|&i| g.ops[i].output)
            .filter(|&t| live(t))
            .collect();
        if outputs.is_empty() {
            outputs.push(g.ops[*self.ops.last().unwrap()].output);
        }
        FusedGroup {
            kind,
            ops: self.ops,
            outputs,
        }
    }
}

/// Why a buffer emitted its group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FlushReason {
    HostRead,
    Incompatible,
    Capacity,
    EndOfStream,
}

impl FlushReason {
    pub fn name(self) -> &'static str {
        match self {
            FlushReason::HostRead => "host_read",
            FlushReason::Incompatible => "incompatible",
            FlushReason::Capacity => "capacity",
            FlushReason::EndOfStream => "end_of_stream",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Flushed {
    pub reason: FlushReason,
    pub group: FusedGroup,
}

/// Online fusion: ops are appended while they extend the open group.
///
/// `live` callbacks decide which produced tensors a flushed group stores.
#[derive(Clone, Debug, Default)]
pub struct FusionBuffer {
    opts: FuseOptions,
    open: Option<Open>,
}

impl FusionBuffer {
    pub fn new(opts: FuseOptions) -> Self {
        FusionBuffer { opts, open: None }
    }

    /// Buffered op indices.
    pub fn pending(&self) -> &[usize] {
        self.open.as_ref().map_or(&[], |o| &o.ops)
    }

    pub fn is_empty(&self) -> bool {
        self.open.is_none()
    }

    pub fn push_op(
        &mut self,
        g: &OperatorGraph,
        op: usize,
        live: &dyn Fn(TensorId) -> bool,
    ) -> Vec<Flushed> {
        let mut out = Vec::new();
        if let Some(open) = &mut self.open {
            if open.ops.len() >= self.opts.capacity {
                out = self.flush(g, FlushReason::Capacity, live);
            } else if let Some(dominant) = open.try_extend(g, op, &self.opts) {
                open.ops.push(op);
                open.dominant = dominant;
                return out;
            } else {
                out = self.flush(g, FlushReason::Incompatible, live);
            }
        }
        self.open = Some(Open::start(g, op));
        out
    }

    pub fn flush(
        &mut self,
        g: &OperatorGraph,
        reason: FlushReason,
        live: &dyn Fn(TensorId) -> bool,
    ) -> Vec<Flushed> {
        match self.open.take() {
            Some(open) => vec![Flushed {
                reason,
                group: open.close(g, live),
            }],
            None => Vec::new(),
        }
    }
}

/// Index of the last op reading each tensor; declared outputs (or sinks when
/// none are declared) map to `usize::MAX`.
pub fn last_uses(g: &OperatorGraph) -> HashMap<TensorId, usize> {
    let mut last = g.last_uses();
    let sinks: Vec<TensorId> = if g.outputs.is_empty() {
        g.produced()
            .into_iter()
            .filter(|t| !last.contains_key(t))
            .collect()
    } else {
        g.outputs.clone()
    };
    for t in sinks {
        last.insert(t, usize::MAX);
    }
    last
}

/// Greedy in-order grouping of a whole graph.
pub fn fuse_static(g: &OperatorGraph, opts: &FuseOptions) -> Vec<FusedGroup> {
    let last = last_uses(g);
    let mut buf = FusionBuffer::new(opts.clone());
    let mut groups = Vec::new();
    for j in 0..g.ops.len() {
        let live = |t: TensorId| last.get(&t).is_some_and(|&u| u >= j);
        groups.extend(buf.push_op(g, j, &live).into_iter().map(|f| f.group));
    }
    let live = |t: TensorId| last.get(&t) == Some(&usize::MAX);
    groups.extend(
        buf.flush(g, FlushReason::EndOfStream, &live)
            .into_iter()
            .map(|f| f.group),
    );
    groups
}

/// Every op alone, storing what later ops or the caller need.
pub fn singleton_groups(g: &OperatorGraph) -> Vec<FusedGroup> {
    g.ops
        .iter()
        .enumerate()
        .map(|(i, op)| FusedGroup {
            kind: GroupKind::Singleton,
            ops: vec![i],
            outputs: vec![op.output],
        })
        .collect()
}

/// For each group, the earlier groups producing something it reads.
pub fn group_dependencies(g: &OperatorGraph, groups: &[FusedGroup]) -> Vec<Vec<usize>> {
    let mut producer: HashMap<TensorId, usize> = HashMap::new();
    let mut deps = Vec::with_capacity(groups.len());
    for (k, grp) in groups.iter().enumerate() {
        let mut d: Vec<usize> = grp
            .inputs(g)
            .iter()
            .filter_map(|t| producer.get(t).copied())
            .collect();
        d.sort_unstable();
        d.dedup();
        deps.push(d);
        for &i in &grp.ops {
            producer.insert(g.ops[i].output, k);
        }
    }
    deps
}
