//! Tile-level virtual instruction set and its bytecode wire format.
//!
//! One [`VirtualInstruction`] performs one tile of one operation. Programs are a
//! fixed header followed by a body of variable-length records; see [`codec`].

mod codec;
mod disasm;

pub use codec::{
    decode_instruction, decode_program, encode_instruction, encode_program, BodyWalk,
    BytecodeProgram, KernelType, ProgramHeader, HEADER_BYTES,
};
pub use disasm::disassemble;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::scalar::Dtype;

/// Coarse grouping of instructions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Category {
    Memory,
    VectorCompute,
    CubeCompute,
    Sync,
}

/// Execution queue of an AI core.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Queue {
    Dma,
    Vector,
    Cube,
    /// Decode and sync issue; instructions never execute here.
    Scalar,
}

impl Queue {
    pub const UNITS: [Queue; 3] = [Queue::Dma, Queue::Vector, Queue::Cube];

    pub fn code(self) -> u8 {
        match self {
            Queue::Dma => 0,
            Queue::Vector => 1,
            Queue::Cube => 2,
            Queue::Scalar => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Queue> {
        Some(match code {
            0 => Queue::Dma,
            1 => Queue::Vector,
            2 => Queue::Cube,
            3 => Queue::Scalar,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Queue::Dma => "dma",
            Queue::Vector => "vector",
            Queue::Cube => "cube",
            Queue::Scalar => "scalar",
        }
    }
}

macro_rules! instruction_kinds {
    ($( $name:ident = $id:literal, $category:ident, $arity:literal; )*) => {
        /// Opcode of a virtual instruction. The discriminant is the wire `Insn_ID`.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        #[repr(u16)]
        pub enum InstructionKind {
            $( $name = $id, )*
        }

        impl InstructionKind {
            pub const ALL: &'static [InstructionKind] = &[$( InstructionKind::$name, )*];

            pub fn from_id(id: u16) -> Option<InstructionKind> {
                match id {
                    $( $id => Some(InstructionKind::$name), )*
                    _ => None,
                }
            }

            pub fn mnemonic(self) -> &'static str {
                match self {
                    $( InstructionKind::$name => stringify!($name), )*
                }
            }

            pub fn category(self) -> Category {
                match self {
                    $( InstructionKind::$name => Category::$category, )*
                }
            }

            /// Number of source addresses carried by the record.
            pub fn arity(self) -> usize {
                match self {
                    $( InstructionKind::$name => $arity, )*
                }
            }
        }
    };
}

instruction_kinds! {
    Load = 0, Memory, 1;
    ViewLoad = 1, Memory, 1;
    Store = 2, Memory, 1;
    ViewStore = 3, Memory, 1;
    Copy = 10, VectorCompute, 1;
    Broadcast = 11, VectorCompute, 1;
    Sqrt = 12, VectorCompute, 1;
    Abs = 13, VectorCompute, 1;
    Log = 14, VectorCompute, 1;
    Exp = 15, VectorCompute, 1;
    Pow = 16, VectorCompute, 2;
    Round = 17, VectorCompute, 1;
    Floor = 18, VectorCompute, 1;
    IsFinite = 19, VectorCompute, 1;
    Adds = 20, VectorCompute, 1;
    Muls = 21, VectorCompute, 1;
    Add = 22, VectorCompute, 2;
    Sub = 23, VectorCompute, 2;
    Mul = 24, VectorCompute, 2;
    Div = 25, VectorCompute, 2;
    Min = 26, VectorCompute, 2;
    Max = 27, VectorCompute, 2;
    Cmp = 28, VectorCompute, 2;
    Cast = 29, VectorCompute, 1;
    Sum = 30, VectorCompute, 1;
    ReduceMax = 31, VectorCompute, 1;
    ReduceMin = 32, VectorCompute, 1;
    Select = 33, VectorCompute, 3;
    Matmul = 40, CubeCompute, 2;
    SyncSet = 50, Sync, 0;
    SyncWait = 51, Sync, 0;
}

impl InstructionKind {
    pub fn id(self) -> u16 {
        self as u16
    }

    /// Cube and sync instructions sit outside the base tile instruction table.
    pub fn is_extension(self) -> bool {
        self.id() >= 40
    }

    pub fn is_memory(self) -> bool {
        self.category() == Category::Memory
    }

    pub fn is_sync(self) -> bool {
        self.category() == Category::Sync
    }

    /// Memory instructions whose destination is global memory.
    pub fn writes_global(self) -> bool {
        matches!(self, InstructionKind::Store | InstructionKind::ViewStore)
    }

    /// Unit queue that executes this kind. Sync instructions are routed by their flag.
    pub fn unit_queue(self) -> Queue {
        match self.category() {
            Category::Memory => Queue::Dma,
            Category::VectorCompute => Queue::Vector,
            Category::CubeCompute => Queue::Cube,
            Category::Sync => Queue::Scalar,
        }
    }

    fn expects(self, extras: &Extras) -> bool {
        use InstructionKind as K;
        matches!(
            (self, extras),
            (K::Load | K::Store, Extras::Mem { .. })
                | (K::ViewLoad | K::ViewStore, Extras::View(_))
                | (K::Adds | K::Muls, Extras::Scalar(_))
                | (K::Cmp, Extras::Cmp(_))
                | (K::Cast, Extras::Cast { .. })
                | (
                    K::Broadcast | K::Sum | K::ReduceMax | K::ReduceMin,
                    Extras::Shape3 { .. }
                )
                | (K::Matmul, Extras::Matmul { .. })
                | (K::SyncSet | K::SyncWait, Extras::Sync(_))
                | (
                    K::Copy
                        | K::Sqrt
                        | K::Abs
                        | K::Log
                        | K::Exp
                        | K::Pow
                        | K::Round
                        | K::Floor
                        | K::IsFinite
                        | K::Add
                        | K::Sub
                        | K::Mul
                        | K::Div
                        | K::Min
                        | K::Max
                        | K::Select,
                    Extras::None
                )
        )
    }
}

impl fmt::Display for InstructionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CmpType {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpType {
    pub const ALL: [CmpType; 6] = [
        CmpType::Eq,
        CmpType::Ne,
        CmpType::Lt,
        CmpType::Le,
        CmpType::Gt,
        CmpType::Ge,
    ];

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Option<CmpType> {
        CmpType::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CmpType::Eq => "EQ",
            CmpType::Ne => "NE",
            CmpType::Lt => "LT",
            CmpType::Le => "LE",
            CmpType::Gt => "GT",
            CmpType::Ge => "GE",
        }
    }

    pub fn parse(s: &str) -> Option<CmpType> {
        CmpType::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
    }

    #[inline]
    pub fn apply(self, a: f64, b: f64) -> bool {
        match self {
            CmpType::Eq => a == b,
            CmpType::Ne => a != b,
            CmpType::Lt => a < b,
            CmpType::Le => a <= b,
            CmpType::Gt => a > b,
            CmpType::Ge => a >= b,
        }
    }
}

/// Visit order of the 2-D output tiles of a matmul.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Swizzle {
    RowMajor,
    ColumnMajor,
    /// Bands of two tile rows, walked column by column, alternating direction per band.
    BlockZigzag,
}

impl Swizzle {
    pub const ALL: [Swizzle; 3] = [
        Swizzle::RowMajor,
        Swizzle::ColumnMajor,
        Swizzle::BlockZigzag,
    ];
    const BAND: usize = 2;

    pub fn code(self) -> u32 {
        match self {
            Swizzle::RowMajor => 0,
            Swizzle::ColumnMajor => 1,
            Swizzle::BlockZigzag => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Swizzle> {
        Swizzle::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Swizzle::RowMajor => "row-major",
            Swizzle::ColumnMajor => "column-major",
            Swizzle::BlockZigzag => "block-zigzag",
        }
    }

    /// Maps a linear tile index to its (row block, column block) in a `rows x cols` grid.
    pub fn coords(self, index: usize, rows: usize, cols: usize) -> (usize, usize) {
        debug_assert!(index < rows * cols);
        match self {
            Swizzle::RowMajor => (index / cols, index % cols),
            Swizzle::ColumnMajor => (index % rows, index / rows),
            Swizzle::BlockZigzag => {
                let band_tiles = Self::BAND * cols;
                let band = index / band_tiles;
                let within = index % band_tiles;
                let height = Self::BAND.min(rows - band * Self::BAND);
                let col = within / height;
                let row = band * Self::BAND + within % height;
                let col = if band % 2 == 1 { cols - 1 - col } else { col };
                (row, col)
            }
        }
    }
}

/// Where a grid view's tile origin comes from, per dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Anchor {
    /// Follows the tile's row block.
    Row,
    /// Follows the tile's column block.
    Col,
    /// A block index fixed at encode time (e.g. the k chunk of a matmul slab).
    Fixed(u32),
}

impl Anchor {
    pub fn code(self) -> u32 {
        match self {
            Anchor::Row => 0,
            Anchor::Col => 1,
            Anchor::Fixed(b) => 2 + b,
        }
    }

    pub fn from_code(code: u32) -> Anchor {
        match code {
            0 => Anchor::Row,
            1 => Anchor::Col,
            b => Anchor::Fixed(b - 2),
        }
    }
}

/// How a strided view is cut into tiles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ViewMode {
    /// Tile `i` covers the flat range `[i*tile_size, ..)` of the view's row-major
    /// index space; `sizes` is the whole view shape.
    Flat,
    /// Tile `i` is a box of extent `sizes` whose origin follows the swizzled
    /// `(row, col)` block of `i` in a `rows x cols` grid; elements past `extents`
    /// are zero-padded on load and skipped on store.
    Grid {
        swizzle: Swizzle,
        rows: u32,
        cols: u32,
    },
}

/// Operands of `ViewLoad` / `ViewStore`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ViewSpec {
    pub dtype: Dtype,
    pub mode: ViewMode,
    /// Global element stride per dimension; 0 broadcasts.
    pub strides: Vec<u32>,
    pub sizes: Vec<u32>,
    /// Grid mode only: full view extents.
    pub extents: Vec<u32>,
    /// Grid mode only.
    pub anchors: Vec<Anchor>,
}

impl ViewSpec {
    pub fn tile_dims(&self) -> usize {
        self.strides.len()
    }

    fn is_consistent(&self) -> bool {
        let d = self.strides.len();
        if d == 0 || self.sizes.len() != d || self.sizes.contains(&0) {
            return false;
        }
        match self.mode {
            ViewMode::Flat => self.extents.is_empty() && self.anchors.is_empty(),
            ViewMode::Grid { rows, cols, .. } => {
                rows >= 1
                    && cols >= 1
                    && self.extents.len() == d
                    && self.anchors.len() == d
                    && !self.extents.contains(&0)
                    && self
                        .anchors
                        .iter()
                        .all(|a| !matches!(a, Anchor::Fixed(b) if *b > u32::MAX - 2))
            }
        }
    }
}

/// Sync flag operand: an event id plus the producing and consuming queues.
///
/// Packed on the wire as `event | from << 16 | to << 24`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SyncFlag {
    pub event: u16,
    pub from: Queue,
    pub to: Queue,
}

impl SyncFlag {
    pub fn new(event: u16, from: Queue, to: Queue) -> Self {
        SyncFlag { event, from, to }
    }

    pub fn pack(self) -> u32 {
        self.event as u32 | (self.from.code() as u32) << 16 | (self.to.code() as u32) << 24
    }

    pub fn unpack(raw: u32) -> Option<SyncFlag> {
        Some(SyncFlag {
            event: (raw & 0xffff) as u16,
            from: Queue::from_code(((raw >> 16) & 0xff) as u8)?,
            to: Queue::from_code((raw >> 24) as u8)?,
        })
    }
}

/// Kind-specific operands.
#[derive(Clone, Debug, PartialEq)]
pub enum Extras {
    None,
    /// `Load` / `Store`.
    Mem {
        tile_stride: u32,
        dtype: Dtype,
    },
    View(ViewSpec),
    /// `Adds` / `Muls` immediate.
    Scalar(f64),
    Cmp(CmpType),
    Cast {
        from: Dtype,
        to: Dtype,
    },
    /// `(M, size, N)` of `Broadcast` and the reductions.
    Shape3 {
        m: u32,
        size: u32,
        n: u32,
    },
    Matmul {
        m: u32,
        k: u32,
        n: u32,
        accumulate: bool,
    },
    Sync(SyncFlag),
}

/// One tile-level operation.
///
/// Addresses are flat byte offsets: `dst` is local except for stores, and
/// `srcs` are local except for loads. `tile_size` and `total_size` are element
/// counts; tile `i` processes `min(tile_size, total_size - i * tile_size)`
/// elements.
#[derive(Clone, Debug, PartialEq)]
pub struct VirtualInstruction {
    pub kind: InstructionKind,
    pub dst: u64,
    pub srcs: Vec<u64>,
    pub tile_size: u32,
    pub total_size: u32,
    pub extras: Extras,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum InvalidInstruction {
    #[error("{kind} expects {expected} sources, got {got}")]
    Arity {
        kind: InstructionKind,
        expected: usize,
        got: usize,
    },
    #[error("{kind} carries mismatched operands {extras:?}")]
    Extras {
        kind: InstructionKind,
        extras: Box<Extras>,
    },
    #[error("{0} requires tile_size >= 1 and total_size >= 1")]
    EmptyTile(InstructionKind),
    #[error("{kind} tile_stride {stride} is smaller than tile_size {tile}")]
    Stride {
        kind: InstructionKind,
        stride: u32,
        tile: u32,
    },
    #[error("sync instructions carry only a flag")]
    SyncOperands,
    #[error("inconsistent view operands")]
    View,
}

impl VirtualInstruction {
    pub fn new(
        kind: InstructionKind,
        dst: u64,
        srcs: Vec<u64>,
        tile_size: u32,
        total_size: u32,
        extras: Extras,
    ) -> Self {
        VirtualInstruction {
            kind,
            dst,
            srcs,
            tile_size,
            total_size,
            extras,
        }
    }

    pub fn sync_set(flag: SyncFlag) -> Self {
        Self::new(
            InstructionKind::SyncSet,
            0,
            Vec::new(),
            1,
            1,
            Extras::Sync(flag),
        )
    }

    pub fn sync_wait(flag: SyncFlag) -> Self {
        Self::new(
            InstructionKind::SyncWait,
            0,
            Vec::new(),
            1,
            1,
            Extras::Sync(flag),
        )
    }

    /// Queue the instruction occupies when executed.
    pub fn queue(&self) -> Queue {
        match (&self.extras, self.kind) {
            (Extras::Sync(f), InstructionKind::SyncSet) => f.from,
            (Extras::Sync(f), InstructionKind::SyncWait) => f.to,
            _ => self.kind.unit_queue(),
        }
    }

    /// Number of tiles the instruction's buffer spans.
    pub fn tile_count(&self) -> u64 {
        (self.total_size as u64).div_ceil(self.tile_size as u64)
    }

    /// Elements processed for tile `i`.
    pub fn effective_size(&self, tile_index: u64) -> u64 {
        let start = tile_index * self.tile_size as u64;
        (self.tile_size as u64).min((self.total_size as u64).saturating_sub(start))
    }

    pub fn validate(&self) -> Result<(), InvalidInstruction> {
        let kind = self.kind;
        if kind.is_sync() {
            let canonical = self.dst == 0
                && self.srcs.is_empty()
                && self.tile_size == 1
                && self.total_size == 1;
            if !canonical {
                return Err(InvalidInstruction::SyncOperands);
            }
        }
        if self.srcs.len() != kind.arity() {
            return Err(InvalidInstruction::Arity {
                kind,
                expected: kind.arity(),
                got: self.srcs.len(),
            });
        }
        if !kind.expects(&self.extras) {
            return Err(InvalidInstruction::Extras {
                kind,
                extras: Box::new(self.extras.clone()),
            });
        }
        if self.tile_size == 0 || self.total_size == 0 {
            return Err(InvalidInstruction::EmptyTile(kind));
        }
        match &self.extras {
            Extras::Mem { tile_stride, .. } if *tile_stride < self.tile_size => {
                Err(InvalidInstruction::Stride {
                    kind,
                    stride: *tile_stride,
                    tile: self.tile_size,
                })
            }
            Extras::View(v) if !v.is_consistent() => Err(InvalidInstruction::View),
            _ => Ok(()),
        }
    }
}
