//! Basic-operator computation graphs with symbolic or concrete shapes.

mod analysis;
mod decompose;
mod symbols;

pub use analysis::{dominant_shape, peak_live_count, peak_live_count_with, LivenessMode};
pub use decompose::{decompose, Compound};
pub use symbols::SymbolTable;

use std::collections::HashMap;
use std::fmt;

use crate::error::GraphError;
use crate::isa::CmpType;
use crate::scalar::Dtype;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(pub u32);

impl TensorId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// One dimension: a known extent or a named symbol.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum SymDim {
    Const(usize),
    Sym(String),
}

impl SymDim {
    pub fn as_const(&self) -> Option<usize> {
        match self {
            SymDim::Const(n) => Some(*n),
            SymDim::Sym(_) => None,
        }
    }

    pub fn is_one(&self) -> bool {
        matches!(self, SymDim::Const(1))
    }
}

impl From<usize> for SymDim {
    fn from(n: usize) -> Self {
        SymDim::Const(n)
    }
}

impl From<&str> for SymDim {
    fn from(s: &str) -> Self {
        SymDim::Sym(s.to_string())
    }
}

impl fmt::Display for SymDim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SymDim::Const(n) => write!(f, "{n}"),
            SymDim::Sym(s) => f.write_str(s),
        }
    }
}

/// Concrete shape as symbolic dims.
pub fn dims(extents: &[usize]) -> Vec<SymDim> {
    extents.iter().map(|&n| SymDim::Const(n)).collect()
}

pub fn shape_string(shape: &[SymDim]) -> String {
    let parts: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", parts.join(","))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorMeta {
    pub id: TensorId,
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<SymDim>,
    /// Element strides; `None` means contiguous row-major.
    pub strides: Option<Vec<usize>>,
    /// Global byte address, assigned when bound to a device.
    pub addr: Option<u64>,
}

impl TensorMeta {
    pub fn concrete_shape(&self) -> Result<Vec<usize>, GraphError> {
        self.shape
            .iter()
            .map(|d| match d {
                SymDim::Const(n) => Ok(*n),
                SymDim::Sym(s) => Err(GraphError::Unbound(s.clone())),
            })
            .collect()
    }

    pub fn numel(&self) -> Result<usize, GraphError> {
        Ok(self.concrete_shape()?.iter().product())
    }

    pub fn is_contiguous(&self) -> bool {
        match (&self.strides, self.concrete_shape()) {
            (None, _) => true,
            (Some(s), Ok(shape)) => *s == contiguous_strides(&shape),
            (Some(_), Err(_)) => false,
        }
    }

    /// Element strides, explicit or row-major.
    pub fn element_strides(&self) -> Result<Vec<usize>, GraphError> {
        match &self.strides {
            Some(s) => Ok(s.clone()),
            None => Ok(contiguous_strides(&self.concrete_shape()?)),
        }
    }

    /// Bytes spanned in global memory (largest reachable element + 1).
    pub fn footprint_bytes(&self) -> Result<usize, GraphError> {
        let shape = self.concrete_shape()?;
        let strides = self.element_strides()?;
        let last: usize = shape
            .iter()
            .zip(&strides)
            .map(|(&n, &s)| (n.saturating_sub(1)) * s)
            .sum();
        Ok((last + 1) * self.dtype.bytes())
    }
}

pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Operator semantics at graph granularity. Reductions and broadcasts act on
/// the last axis only.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
    Pow,
    Sqrt,
    Abs,
    Log,
    Exp,
    Round,
    Floor,
    IsFinite,
    Adds(f64),
    Muls(f64),
    Cmp(CmpType),
    Cast(Dtype),
    /// `select(cond, on_true, on_false)`.
    Select,
    /// Expands a trailing size-1 axis to the given extent.
    Broadcast(SymDim),
    Sum,
    ReduceMax,
    ReduceMin,
    Copy,
    Matmul,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Min => "min",
            OpKind::Max => "max",
            OpKind::Pow => "pow",
            OpKind::Sqrt => "sqrt",
            OpKind::Abs => "abs",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Round => "round",
            OpKind::Floor => "floor",
            OpKind::IsFinite => "isfinite",
            OpKind::Adds(_) => "adds",
            OpKind::Muls(_) => "muls",
            OpKind::Cmp(_) => "cmp",
            OpKind::Cast(_) => "cast",
            OpKind::Select => "select",
            OpKind::Broadcast(_) => "broadcast",
            OpKind::Sum => "sum",
            OpKind::ReduceMax => "reduce_max",
            OpKind::ReduceMin => "reduce_min",
            OpKind::Copy => "copy",
            OpKind::Matmul => "matmul",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div
            | OpKind::Min
            | OpKind::Max
            | OpKind::Pow
            | OpKind::Cmp(_)
            | OpKind::Matmul => 2,
            OpKind::Select => 3,
            _ => 1,
        }
    }

    pub fn is_matmul(&self) -> bool {
        matches!(self, OpKind::Matmul)
    }

    pub fn is_reduction(&self) -> bool {
        matches!(self, OpKind::Sum | OpKind::ReduceMax | OpKind::ReduceMin)
    }

    /// Changes the trailing extent (reductions and broadcasts).
    pub fn is_axis_op(&self) -> bool {
        self.is_reduction() || matches!(self, OpKind::Broadcast(_))
    }

    pub fn is_elementwise(&self) -> bool {
        !self.is_matmul() && !self.is_axis_op()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasicOp {
    pub kind: OpKind,
    pub inputs: Vec<TensorId>,
    pub output: TensorId,
}

/// Tensors, ops in topological order, symbol facts and the declared outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorGraph {
    pub tensors: Vec<TensorMeta>,
    pub ops: Vec<BasicOp>,
    pub outputs: Vec<TensorId>,
    pub symbols: SymbolTable,
}

impl OperatorGraph {
    pub fn tensor(&self, id: TensorId) -> &TensorMeta {
        &self.tensors[id.index()]
    }

    pub fn tensor_mut(&mut self, id: TensorId) -> &mut TensorMeta {
        &mut self.tensors[id.index()]
    }

    pub fn find(&self, name: &str) -> Option<TensorId> {
        self.tensors.iter().find(|t| t.name == name).map(|t| t.id)
    }

    /// Index of the op producing `id`, if any.
    pub fn producer(&self, id: TensorId) -> Option<usize> {
        self.ops.iter().position(|op| op.output == id)
    }

    /// Tensors read by some op but produced by none, in first-use order.
    pub fn inputs(&self) -> Vec<TensorId> {
        let produced: Vec<bool> = {
            let mut p = vec![false; self.tensors.len()];
            for op in &self.ops {
                p[op.output.index()] = true;
            }
            p
        };
        let mut seen = vec![false; self.tensors.len()];
        let mut out = Vec::new();
        for op in &self.ops {
            for &t in &op.inputs {
                if !produced[t.index()] && !seen[t.index()] {
                    seen[t.index()] = true;
                    out.push(t);
                }
            }
        }
        out
    }

    pub fn has_matmul(&self) -> bool {
        self.ops.iter().any(|op| op.kind.is_matmul())
    }

    pub fn is_concrete(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.shape.iter().all(|d| d.as_const().is_some()))
    }

    /// Checks topological order, single writers, arity and shapes.
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut defined = vec![false; self.tensors.len()];
        let produced: Vec<bool> = {
            let mut p = vec![false; self.tensors.len()];
            for op in &self.ops {
                if p[op.output.index()] {
                    return Err(GraphError::MultipleWriters(
                        self.tensor(op.output).name.clone(),
                    ));
                }
                p[op.output.index()] = true;
            }
            p
        };
        for (i, t) in self.tensors.iter().enumerate() {
            if !produced[i] {
                defined[i] = true;
            }
            if t.shape.iter().any(|d| matches!(d, SymDim::Const(0))) {
                return Err(GraphError::Invalid(format!(
                    "tensor `{}` has a zero extent",
                    t.name
                )));
            }
        }
        for op in &self.ops {
            if op.inputs.len() != op.kind.arity() {
                return Err(self.bad_op(op, format!("expects {} inputs", op.kind.arity())));
            }
            for &t in &op.inputs {
                if !defined[t.index()] {
                    return Err(self.bad_op(
                        op,
                        format!("reads `{}` before it is produced", self.tensor(t).name),
                    ));
                }
            }
            let metas: Vec<&TensorMeta> = op.inputs.iter().map(|&t| self.tensor(t)).collect();
            let (dtype, shape) =
                infer(&op.kind, &metas, &self.symbols).map_err(|reason| self.bad_op(op, reason))?;
            let out = self.tensor(op.output);
            if out.dtype != dtype || !self.symbols.shapes_equal(&out.shape, &shape) {
                return Err(self.bad_op(
                    op,
                    format!(
                        "declared output {} {} but inferred {} {}",
                        out.dtype,
                        shape_string(&out.shape),
                        dtype,
                        shape_string(&shape)
                    ),
                ));
            }
            defined[op.output.index()] = true;
        }
        Ok(())
    }

    fn bad_op(&self, op: &BasicOp, reason: String) -> GraphError {
        GraphError::BadOp {
            op: format!("{}->{}", op.kind.name(), self.tensor(op.output).name),
            reason,
        }
    }

    /// Replaces every bound symbol by its value. Fails on unbound symbols.
    pub fn concretize(&self) -> Result<OperatorGraph, GraphError> {
        let mut g = self.clone();
        for t in &mut g.tensors {
            for d in &mut t.shape {
                if let SymDim::Sym(name) = d {
                    let v = self
                        .symbols
                        .value(name)
                        .ok_or_else(|| GraphError::Unbound(name.clone()))?;
                    *d = SymDim::Const(v);
                }
            }
        }
        for op in &mut g.ops {
            if let OpKind::Broadcast(SymDim::Sym(name)) = &op.kind {
                let v = self
                    .symbols
                    .value(name)
                    .ok_or_else(|| GraphError::Unbound(name.clone()))?;
                op.kind = OpKind::Broadcast(SymDim::Const(v));
            }
        }
        Ok(g)
    }

    /// The same tensor table restricted to `ops` (indices into `self.ops`),
    /// with `outputs` as the declared results.
    pub fn subgraph(&self, ops: &[usize], outputs: Vec<TensorId>) -> OperatorGraph {
        OperatorGraph {
            tensors: self.tensors.clone(),
            ops: ops.iter().map(|&i| self.ops[i].clone()).collect(),
            outputs,
            symbols: self.symbols.clone(),
        }
    }

    /// Tensors produced by `ops`.
    pub fn produced(&self) -> Vec<TensorId> {
        self.ops.iter().map(|op| op.output).collect()
    }

    /// Last op index reading each tensor.
    pub fn last_uses(&self) -> HashMap<TensorId, usize> {
        let mut last = HashMap::new();
        for (i, op) in self.ops.iter().enumerate() {
            for &t in &op.inputs {
                last.insert(t, i);
            }
        }
        last
    }
}

/// Output dtype and shape of `kind` applied to `inputs`.
pub fn infer(
    kind: &OpKind,
    inputs: &[&TensorMeta],
    symbols: &SymbolTable,
) -> Result<(Dtype, Vec<SymDim>), String> {
    if inputs.len() != kind.arity() {
        return Err(format!(
            "expects {} inputs, got {}",
            kind.arity(),
            inputs.len()
        ));
    }
    let same_dtype = |ts: &[&TensorMeta]| -> Result<Dtype, String> {
        let d = ts[0].dtype;
        if ts.iter().any(|t| t.dtype != d) {
            return Err("operand dtypes differ; insert a cast".into());
        }
        Ok(d)
    };
    let bcast = |ts: &[&TensorMeta]| -> Result<Vec<SymDim>, String> {
        let mut shape = ts[0].shape.clone();
        for t in &ts[1..] {
            shape = symbols
                .broadcast(&shape, &t.shape)
                .map_err(|e| e.to_string())?;
        }
        Ok(shape)
    };
    match kind {
        OpKind::Matmul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape.len() != 2 || b.shape.len() != 2 {
                return Err("matmul operands must be rank 2".into());
            }
            if !symbols.dims_equal(&a.shape[1], &b.shape[0]) {
                return Err(format!(
                    "inner dimensions {} and {} do not unify",
                    a.shape[1], b.shape[0]
                ));
            }
            Ok((
                same_dtype(inputs)?,
                vec![a.shape[0].clone(), b.shape[1].clone()],
            ))
        }
        OpKind::Sum | OpKind::ReduceMax | OpKind::ReduceMin => {
            let x = inputs[0];
            let mut shape = x.shape.clone();
            match shape.last_mut() {
                Some(d) => *d = SymDim::Const(1),
                None => return Err("cannot reduce a rank-0 tensor".into()),
            }
            Ok((x.dtype, shape))
        }
        OpKind::Broadcast(size) => {
            let x = inputs[0];
            let mut shape = x.shape.clone();
            match shape.last_mut() {
                Some(d) if d.is_one() => *d = size.clone(),
                _ => return Err("broadcast input needs a trailing size-1 axis".into()),
            }
            Ok((x.dtype, shape))
        }
        OpKind::Select => {
            let dtype = same_dtype(&inputs[1..])?;
            Ok((dtype, bcast(inputs)?))
        }
        OpKind::Cast(to) => Ok((*to, inputs[0].shape.clone())),
        _ => Ok((same_dtype(inputs)?, bcast(inputs)?)),
    }
}

/// Incremental graph construction with shape inference.
#[derive(Clone, Debug, Default)]
pub struct GraphBuilder {
    tensors: Vec<TensorMeta>,
    ops: Vec<BasicOp>,
    outputs: Vec<TensorId>,
    symbols: SymbolTable,
    names: HashMap<String, TensorId>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn symbols_mut(&mut self) -> &mut SymbolTable {
        &mut self.symbols
    }

    pub fn symbols(&self) -> &SymbolTable {
        &self.symbols
    }

    pub fn meta(&self, id: TensorId) -> &TensorMeta {
        &self.tensors[id.index()]
    }

    pub fn find(&self, name: &str) -> Option<TensorId> {
        self.names.get(name).copied()
    }

    fn add_tensor(
        &mut self,
        name: &str,
        dtype: Dtype,
        shape: Vec<SymDim>,
        strides: Option<Vec<usize>>,
    ) -> Result<TensorId, GraphError> {
        if self.names.contains_key(name) {
            return Err(GraphError::MultipleWriters(name.to_string()));
        }
        for d in &shape {
            match d {
                SymDim::Const(0) => {
                    return Err(GraphError::Invalid(format!(
                        "tensor `{name}` has a zero extent"
                    )))
                }
                SymDim::Sym(s) => self.symbols.declare(s),
                SymDim::Const(_) => {}
            }
        }
        if let Some(s) = &strides {
            if s.len() != shape.len() {
                return Err(GraphError::Invalid(format!(
                    "tensor `{name}` has {} strides for rank {}",
                    s.len(),
                    shape.len()
                )));
            }
        }
        let id = TensorId(self.tensors.len() as u32);
        self.tensors.push(TensorMeta {
            id,
            name: name.to_string(),
            dtype,
            shape,
            strides,
            addr: None,
        });
        self.names.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn input(
        &mut self,
        name: &str,
        dtype: Dtype,
        shape: Vec<SymDim>,
    ) -> Result<TensorId, GraphError> {
        self.add_tensor(name, dtype, shape, None)
    }

    pub fn strided_input(
        &mut self,
        name: &str,
        dtype: Dtype,
        shape: Vec<SymDim>,
        strides: Vec<usize>,
    ) -> Result<TensorId, GraphError> {
        self.add_tensor(name, dtype, shape, Some(strides))
    }

    /// Appends an op with an auto-named output.
    pub fn op(&mut self, kind: OpKind, inputs: &[TensorId]) -> Result<TensorId, GraphError> {
        let name = format!("%{}", self.tensors.len());
        self.op_named(kind, inputs, &name)
    }

    pub fn op_named(
        &mut self,
        kind: OpKind,
        inputs: &[TensorId],
        out: &str,
    ) -> Result<TensorId, GraphError> {
        if let Some(&bad) = inputs.iter().find(|t| t.index() >= self.tensors.len()) {
            return Err(GraphError::UnknownTensor(format!("{bad:?}")));
        }
        if !kind.is_matmul() && !kind.is_axis_op() {
            self.equate_operand_symbols(inputs)?;
        }
        let metas: Vec<&TensorMeta> = inputs.iter().map(|&t| &self.tensors[t.index()]).collect();
        let (dtype, shape) =
            infer(&kind, &metas, &self.symbols).map_err(|reason| GraphError::BadOp {
                op: format!("{}->{}", kind.name(), out),
                reason,
            })?;
        let id = self.add_tensor(out, dtype, shape, None)?;
        self.ops.push(BasicOp {
            kind,
            inputs: inputs.to_vec(),
            output: id,
        });
        Ok(id)
    }

    /// An element-wise op on two symbolic extents in the same position only
    /// makes sense if they are equal, so that fact is recorded.
    fn equate_operand_symbols(&mut self, inputs: &[TensorId]) -> Result<(), GraphError> {
        let shapes: Vec<Vec<SymDim>> = inputs
            .iter()
            .map(|t| self.tensors[t.index()].shape.clone())
            .collect();
        let rank = shapes.iter().map(Vec::len).max().unwrap_or(0);
        for pos in 0..rank {
            let syms: Vec<&str> = shapes
                .iter()
                .filter_map(|s| (pos + s.len()).checked_sub(rank).map(|i| &s[i]))
                .filter_map(|d| match d {
                    SymDim::Sym(name) => Some(name.as_str()),
                    SymDim::Const(_) => None,
                })
                .collect();
            for pair in syms.windows(2) {
                self.symbols.equate(pair[0], pair[1])?;
            }
        }
        Ok(())
    }

    pub fn output(&mut self, id: TensorId) -> &mut Self {
        if !self.outputs.contains(&id) {
            self.outputs.push(id);
        }
        self
    }

    /// The graph built so far.
    pub fn snapshot(&self) -> OperatorGraph {
        self.clone().build()
    }

    pub fn build(self) -> OperatorGraph {
        OperatorGraph {
            tensors: self.tensors,
            ops: self.ops,
            outputs: self.outputs,
            symbols: self.symbols,
        }
    }
}
