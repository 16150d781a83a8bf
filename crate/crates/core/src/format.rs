//! JSON graph files and JSON-lines trace files.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, GraphError};
use crate::graph::{decompose, Compound, GraphBuilder, OpKind, OperatorGraph, SymDim, TensorId};
use crate::isa::CmpType;
use crate::oracle::RefTensor;
use crate::scalar::Dtype;

/// A shape entry: an extent or a symbol name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DimSpec {
    Extent(usize),
    Symbol(String),
}

impl DimSpec {
    pub fn to_dim(&self) -> SymDim {
        match self {
            DimSpec::Extent(n) => SymDim::Const(*n),
            DimSpec::Symbol(s) => SymDim::Sym(s.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    #[serde(alias = "name")]
    pub id: String,
    pub dtype: Dtype,
    pub shape: Vec<DimSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strides: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attrs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scalar: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cmp: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtype: Option<Dtype>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<DimSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taken: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpSpec {
    pub kind: String,
    #[serde(rename = "in")]
    pub inputs: Vec<String>,
    pub out: String,
    #[serde(default)]
    pub attrs: Attrs,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SymbolSpec {
    #[serde(default)]
    pub names: Vec<String>,
    /// Pairs of symbols known to be equal.
    #[serde(default)]
    pub equal: Vec<(String, String)>,
    #[serde(default)]
    pub values: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphFile {
    #[serde(default)]
    pub symbols: SymbolSpec,
    pub tensors: Vec<TensorSpec>,
    pub ops: Vec<OpSpec>,
    #[serde(default)]
    pub outputs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    /// Declares an input tensor and its data.
    Input(TensorSpec),
    Bind {
        sym: String,
        value: usize,
    },
    Op(OpSpec),
    HostRead {
        tensor: String,
    },
    Branch {
        taken: bool,
    },
    End,
}

fn parse_error(e: impl std::fmt::Display) -> Error {
    Error::Parse(e.to_string())
}

impl GraphFile {
    pub fn parse(text: &str) -> Result<GraphFile, Error> {
        serde_json::from_str(text).map_err(parse_error)
    }

    /// Builds the graph; input data come from each tensor's `data`, its
    /// `seed`, or `default_seed` plus the tensor's position.
    pub fn build(&self, default_seed: u64) -> Result<(OperatorGraph, InputData), Error> {
        let mut b = GraphBuilder::new();
        for name in &self.symbols.names {
            b.symbols_mut().declare(name);
        }
        for (x, y) in &self.symbols.equal {
            b.symbols_mut().equate(x, y)?;
        }
        for (name, &v) in &self.symbols.values {
            b.symbols_mut().bind(name, v)?;
        }
        let mut data = InputData::default();
        for (i, t) in self.tensors.iter().enumerate() {
            declare_input(&mut b, t)?;
            data.specs
                .push((t.clone(), default_seed.wrapping_add(i as u64)));
        }
        for op in &self.ops {
            apply_op(&mut b, op)?;
        }
        for name in &self.outputs {
            let id = b
                .find(name)
                .ok_or_else(|| GraphError::UnknownTensor(name.clone()))?;
            b.output(id);
        }
        let g = b.build();
        g.validate()?;
        Ok((g, data))
    }
}

/// Deferred input values: generated once shapes are concrete.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InputData {
    specs: Vec<(TensorSpec, u64)>,
}

impl InputData {
    pub fn push(&mut self, spec: TensorSpec, default_seed: u64) {
        self.specs.push((spec, default_seed));
    }

    /// Values for every declared input of the concrete graph `g`.
    pub fn materialize(&self, g: &OperatorGraph) -> Result<HashMap<String, RefTensor<f64>>, Error> {
        let mut out = HashMap::new();
        for (spec, default_seed) in &self.specs {
            let id = g
                .find(&spec.id)
                .ok_or_else(|| GraphError::UnknownTensor(spec.id.clone()))?;
            out.insert(spec.id.clone(), input_value(g, id, spec, *default_seed)?);
        }
        Ok(out)
    }
}

/// Value of one declared input with the graph's current symbol bindings.
pub fn input_value(
    g: &OperatorGraph,
    id: TensorId,
    spec: &TensorSpec,
    default_seed: u64,
) -> Result<RefTensor<f64>, Error> {
    let meta = g.tensor(id);
    let shape: Vec<usize> = meta
        .shape
        .iter()
        .map(|d| match d {
            SymDim::Const(n) => Ok(*n),
            SymDim::Sym(s) => g
                .symbols
                .value(s)
                .ok_or_else(|| GraphError::Unbound(s.clone())),
        })
        .collect::<Result<_, _>>()?;
    tensor_value(spec, meta.dtype, shape, default_seed)
}

/// Explicit data of `spec`, or seeded uniform values of the given shape.
pub fn tensor_value(
    spec: &TensorSpec,
    dtype: Dtype,
    shape: Vec<usize>,
    default_seed: u64,
) -> Result<RefTensor<f64>, Error> {
    match &spec.data {
        Some(values) => RefTensor::from_f64(dtype, shape, values)
            .map_err(|e| Error::Parse(format!("tensor `{}`: {e}", spec.id))),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.unwrap_or(default_seed));
            Ok(RefTensor::random(dtype, shape, &mut rng))
        }
    }
}

pub fn declare_input(b: &mut GraphBuilder, t: &TensorSpec) -> Result<TensorId, Error> {
    let shape: Vec<SymDim> = t.shape.iter().map(DimSpec::to_dim).collect();
    Ok(match &t.strides {
        Some(s) => b.strided_input(&t.id, t.dtype, shape, s.clone())?,
        None => b.input(&t.id, t.dtype, shape)?,
    })
}

/// Basic op named `kind` with `attrs`, or `None` for a compound name.
pub fn basic_kind(kind: &str, attrs: &Attrs) -> Result<Option<OpKind>, Error> {
    let need_scalar = || {
        attrs
            .scalar
            .ok_or_else(|| Error::Parse(format!("`{kind}` needs attrs.scalar")))
    };
    Ok(Some(match kind {
        "add" => OpKind::Add,
        "sub" => OpKind::Sub,
        "mul" => OpKind::Mul,
        "div" => OpKind::Div,
        "min" => OpKind::Min,
        "max" => OpKind::Max,
        "pow" => OpKind::Pow,
        "sqrt" => OpKind::Sqrt,
        "abs" => OpKind::Abs,
        "log" => OpKind::Log,
        "exp" => OpKind::Exp,
        "round" => OpKind::Round,
        "floor" => OpKind::Floor,
        "isfinite" => OpKind::IsFinite,
        "adds" => OpKind::Adds(need_scalar()?),
        "muls" => OpKind::Muls(need_scalar()?),
        "cmp" => {
            let c = attrs.cmp.as_deref().unwrap_or("lt");
            OpKind::Cmp(
                CmpType::parse(c)
                    .ok_or_else(|| Error::Parse(format!("unknown comparison `{c}`")))?,
            )
        }
        "cast" => OpKind::Cast(
            attrs
                .dtype
                .ok_or_else(|| Error::Parse("`cast` needs attrs.dtype".into()))?,
        ),
        "select" => OpKind::Select,
        "broadcast" => OpKind::Broadcast(
            attrs
                .size
                .as_ref()
                .ok_or_else(|| Error::Parse("`broadcast` needs attrs.size".into()))?
                .to_dim(),
        ),
        "sum" => OpKind::Sum,
        "reduce_max" => OpKind::ReduceMax,
        "reduce_min" => OpKind::ReduceMin,
        "copy" => OpKind::Copy,
        "matmul" => OpKind::Matmul,
        _ => return Ok(None),
    }))
}

/// Appends one op (basic or compound) to `b`.
pub fn apply_op(b: &mut GraphBuilder, op: &OpSpec) -> Result<TensorId, Error> {
    let inputs: Vec<TensorId> = op
        .inputs
        .iter()
        .map(|n| {
            b.find(n)
                .ok_or_else(|| GraphError::UnknownTensor(n.clone()))
        })
        .collect::<Result<_, _>>()?;
    match basic_kind(&op.kind, &op.attrs)? {
        Some(kind) => Ok(b.op_named(kind, &inputs, &op.out)?),
        None => {
            let c = Compound::parse(&op.kind, op.attrs.eps, op.attrs.taken)?;
            if inputs.len() != c.arity() {
                return Err(Error::Parse(format!(
                    "`{}` takes {} inputs, got {}",
                    op.kind,
                    c.arity(),
                    inputs.len()
                )));
            }
            Ok(decompose(b, c, &inputs, &op.out)?)
        }
    }
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>, Error> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// A trace file is recognized by its first non-blank character not opening a
/// multi-line JSON object with a `tensors` key.
pub fn looks_like_trace(text: &str) -> bool {
    text.lines()
        .find(|l| !l.trim().is_empty())
        .is_some_and(|l| l.contains("\"event\""))
}
