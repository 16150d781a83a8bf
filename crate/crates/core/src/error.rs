use thiserror::Error;

use crate::isa::{InstructionKind, InvalidInstruction};

#[derive(Debug, Error, PartialEq)]
pub enum EncodeError {
    #[error("invalid instruction: {0}")]
    Invalid(InvalidInstruction),
    #[error("{kind} record of {len} bytes exceeds the 16-bit Insn_Len")]
    RecordTooLong { kind: InstructionKind, len: usize },
    #[error("program body must contain at least one instruction")]
    EmptyProgram,
    #[error("header needs total_tiles >= 1 and block_dim >= 1")]
    BadHeader,
}

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("unknown Insn_ID {id} at byte {offset}")]
    UnknownInstruction { offset: usize, id: u16 },
    #[error("record at byte {offset} claims {len} bytes but only {available} remain")]
    Overrun {
        offset: usize,
        len: usize,
        available: usize,
    },
    #[error("malformed record at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: &'static str },
    #[error("invalid instruction at byte {offset}: {source}")]
    Invalid {
        offset: usize,
        source: InvalidInstruction,
    },
    #[error("program body is empty")]
    EmptyBody,
    #[error("program shorter than its header ({len} bytes)")]
    TruncatedHeader { len: usize },
    #[error("bad header field {field} = {value}")]
    BadHeader { field: &'static str, value: u32 },
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("tensor `{0}` is written more than once")]
    MultipleWriters(String),
    #[error("op {op}: {reason}")]
    BadOp { op: String, reason: String },
    #[error("shapes {a} and {b} cannot be unified")]
    Unify { a: String, b: String },
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("symbol `{0}` has no bound value")]
    Unbound(String),
    #[error("unknown compound operator `{0}`")]
    UnknownCompound(String),
    #[error("only last-axis reductions and broadcasts are supported (axis {0})")]
    UnsupportedAxis(i64),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum TileError {
    #[error("infeasible tiling: {0}")]
    Infeasible(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Error, PartialEq)]
pub enum CompileError {
    #[error("tensor `{0}` has no global address")]
    Unbound(String),
    #[error("local allocation needs {need} bytes but only {have} are available")]
    Allocation { need: usize, have: usize },
    #[error("cannot compile group: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Tile(#[from] TileError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Error, PartialEq)]
pub enum VmError {
    #[error("program requests {requested} cores but the device has {available}")]
    TooManyCores { requested: u32, available: usize },
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("{space} access [{start:#x}, {end:#x}) out of bounds (size {size:#x})")]
    OutOfBounds {
        space: &'static str,
        start: u64,
        end: u64,
        size: u64,
    },
    #[error("local buffer at {0:#x} has no element type")]
    UntypedLocal(u64),
    #[error("unsupported cast {from} -> {to}")]
    Cast { from: String, to: String },
    #[error("cores {a} and {b} both write global bytes [{start:#x}, {end:#x})")]
    WriteConflict {
        a: u32,
        b: u32,
        start: u64,
        end: u64,
    },
    #[error("{0}")]
    Exec(String),
}

/// Top-level error for the runtime and command line.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tile(#[from] TileError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Whether the root cause is an infeasible or unsupported tiling.
    pub fn is_tiling(&self) -> bool {
        matches!(self, Error::Tile(_) | Error::Compile(CompileError::Tile(_)))
    }
}
