//! Bytecode wire format.
//!
//! Program: four little-endian `u32` header fields (kernel type, code size,
//! total tiles, block dim) followed by the body. Each body record starts with
//! `Insn_ID: u16` and `Insn_Len: u16` (whole record, header included), then the
//! operands: addresses as `u64`, sizes and codes as `u32`, immediates as `f64`
//! bit patterns, arrays as a `u32` length followed by `u32` items. Records are
//! zero-padded to a multiple of four bytes.

use crate::error::{DecodeError, EncodeError};
use crate::scalar::Dtype;

use super::{
    Anchor, CmpType, Extras, InstructionKind, Swizzle, SyncFlag, ViewMode, ViewSpec,
    VirtualInstruction,
};

pub const HEADER_BYTES: usize = 16;
const RECORD_HEADER: usize = 4;

/// Which meta-kernel flavour a program runs as.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelType {
    Vector = 0,
    Cube = 1,
    CubeVector = 2,
    Stacked = 3,
}

impl KernelType {
    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Option<KernelType> {
        Some(match code {
            0 => KernelType::Vector,
            1 => KernelType::Cube,
            2 => KernelType::CubeVector,
            3 => KernelType::Stacked,
            _ => return None,
        })
    }

    /// Kernel entry name shown by the disassembler.
    pub fn entry_name(self) -> &'static str {
        match self {
            KernelType::Vector => "vmain.aiv",
            KernelType::Cube => "cmain.aic",
            KernelType::CubeVector => "mix.aic_aiv",
            KernelType::Stacked => "stack.mix",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProgramHeader {
    pub kernel_type: KernelType,
    /// Byte length of the body. Filled in by [`encode_program`].
    pub code_size: u32,
    pub total_tiles: u32,
    pub block_dim: u32,
}

impl ProgramHeader {
    pub fn new(kernel_type: KernelType, total_tiles: u32, block_dim: u32) -> Self {
        ProgramHeader {
            kernel_type,
            code_size: 0,
            total_tiles,
            block_dim,
        }
    }

    /// Tiles handled by each core: `ceil(total_tiles / block_dim)`.
    pub fn body_tile(&self) -> u32 {
        self.total_tiles.div_ceil(self.block_dim.max(1))
    }
}

/// An encoded program. Immutable once built.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BytecodeProgram {
    pub header: ProgramHeader,
    pub body: Vec<u8>,
}

impl BytecodeProgram {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.body.len());
        for v in [
            self.header.kernel_type.code(),
            self.header.code_size,
            self.header.total_tiles,
            self.header.block_dim,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        if bytes.len() < HEADER_BYTES {
            return Err(DecodeError::TruncatedHeader { len: bytes.len() });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
        let kernel_type = KernelType::from_code(word(0)).ok_or(DecodeError::BadHeader {
            field: "kernel_type",
            value: word(0),
        })?;
        let header = ProgramHeader {
            kernel_type,
            code_size: word(1),
            total_tiles: word(2),
            block_dim: word(3),
        };
        if header.code_size as usize != bytes.len() - HEADER_BYTES {
            return Err(DecodeError::BadHeader {
                field: "code_size",
                value: header.code_size,
            });
        }
        if header.total_tiles == 0 {
            return Err(DecodeError::BadHeader {
                field: "total_tiles",
                value: 0,
            });
        }
        if header.block_dim == 0 {
            return Err(DecodeError::BadHeader {
                field: "block_dim",
                value: 0,
            });
        }
        Ok(BytecodeProgram {
            header,
            body: bytes[HEADER_BYTES..].to_vec(),
        })
    }

    /// Walks the body record by record.
    pub fn walk(&self) -> BodyWalk<'_> {
        BodyWalk {
            body: &self.body,
            offset: 0,
            failed: false,
        }
    }
}

/// Iterator over `(offset, instruction, Insn_Len)` of a program body.
pub struct BodyWalk<'a> {
    body: &'a [u8],
    offset: usize,
    failed: bool,
}

impl BodyWalk<'_> {
    /// Byte offset of the next record.
    pub fn offset(&self) -> usize {
        self.offset
    }
}

impl Iterator for BodyWalk<'_> {
    type Item = Result<(usize, VirtualInstruction, usize), DecodeError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.offset >= self.body.len() {
            return None;
        }
        let at = self.offset;
        match decode_instruction(self.body, at) {
            Ok((insn, len)) => {
                self.offset += len;
                Some(Ok((at, insn, len)))
            }
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn array(&mut self, items: impl ExactSizeIterator<Item = u32>) {
        self.u32(items.len() as u32);
        for v in items {
            self.u32(v);
        }
    }
}

/// Encodes one record.
pub fn encode_instruction(insn: &VirtualInstruction) -> Result<Vec<u8>, EncodeError> {
    insn.validate().map_err(EncodeError::Invalid)?;
    let mut w = Writer {
        buf: Vec::with_capacity(40),
    };
    w.buf.extend_from_slice(&insn.kind.id().to_le_bytes());
    w.buf.extend_from_slice(&[0, 0]);
    if let Extras::Sync(flag) = &insn.extras {
        w.u32(flag.pack());
    } else {
        w.u64(insn.dst);
        for &s in &insn.srcs {
            w.u64(s);
        }
        w.u32(insn.tile_size);
        w.u32(insn.total_size);
        match &insn.extras {
            Extras::None | Extras::Sync(_) => {}
            Extras::Mem { tile_stride, dtype } => {
                w.u32(*tile_stride);
                w.u32(dtype.code());
            }
            Extras::View(v) => {
                w.u32(v.dtype.code());
                let (mode, swizzle, rows, cols) = match v.mode {
                    ViewMode::Flat => (0, 0, 0, 0),
                    ViewMode::Grid {
                        swizzle,
                        rows,
                        cols,
                    } => (1, swizzle.code(), rows, cols),
                };
                w.u32(mode);
                w.u32(swizzle);
                w.u32(rows);
                w.u32(cols);
                w.array(v.strides.iter().copied());
                w.array(v.sizes.iter().copied());
                w.array(v.extents.iter().copied());
                w.array(v.anchors.iter().map(|a| a.code()));
            }
            Extras::Scalar(s) => w.u64(s.to_bits()),
            Extras::Cmp(c) => w.u32(c.code()),
            Extras::Cast { from, to } => {
                w.u32(from.code());
                w.u32(to.code());
            }
            Extras::Shape3 { m, size, n } => {
                w.u32(*m);
                w.u32(*size);
                w.u32(*n);
            }
            Extras::Matmul {
                m,
                k,
                n,
                accumulate,
            } => {
                w.u32(*m);
                w.u32(*k);
                w.u32(*n);
                w.u32(*accumulate as u32);
            }
        }
    }
    while !w.buf.len().is_multiple_of(4) {
        w.buf.push(0);
    }
    let len = u16::try_from(w.buf.len()).map_err(|_| EncodeError::RecordTooLong {
        kind: insn.kind,
        len: w.buf.len(),
    })?;
    w.buf[2..4].copy_from_slice(&len.to_le_bytes());
    Ok(w.buf)
}

struct Reader<'a> {
    rec: &'a [u8],
    pos: usize,
    offset: usize,
}

impl Reader<'_> {
    fn malformed(&self, reason: &'static str) -> DecodeError {
        DecodeError::Malformed {
            offset: self.offset,
            reason,
        }
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        let b = self
            .rec
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| self.malformed("operands exceed Insn_Len"))?;
        self.pos += 4;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        let b = self
            .rec
            .get(self.pos..self.pos + 8)
            .ok_or_else(|| self.malformed("operands exceed Insn_Len"))?;
        self.pos += 8;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn array(&mut self) -> Result<Vec<u32>, DecodeError> {
        let n = self.u32()? as usize;
        if n > (self.rec.len() - self.pos) / 4 {
            return Err(self.malformed("array length exceeds Insn_Len"));
        }
        (0..n).map(|_| self.u32()).collect()
    }

    fn dtype(&mut self) -> Result<Dtype, DecodeError> {
        let c = self.u32()?;
        Dtype::from_code(c).ok_or_else(|| self.malformed("unknown dtype code"))
    }
}

/// Decodes the record starting at `offset`, returning it with its `Insn_Len`.
pub fn decode_instruction(
    bytes: &[u8],
    offset: usize,
) -> Result<(VirtualInstruction, usize), DecodeError> {
    let head = bytes
        .get(offset..offset + RECORD_HEADER)
        .ok_or(DecodeError::Overrun {
            offset,
            len: RECORD_HEADER,
            available: bytes.len().saturating_sub(offset),
        })?;
    let id = u16::from_le_bytes([head[0], head[1]]);
    let len = u16::from_le_bytes([head[2], head[3]]) as usize;
    let kind =
        InstructionKind::from_id(id).ok_or(DecodeError::UnknownInstruction { offset, id })?;
    if len < RECORD_HEADER || !len.is_multiple_of(4) {
        return Err(DecodeError::Malformed {
            offset,
            reason: "Insn_Len is not a positive multiple of 4",
        });
    }
    let available = bytes.len() - offset;
    if len > available {
        return Err(DecodeError::Overrun {
            offset,
            len,
            available,
        });
    }
    let mut r = Reader {
        rec: &bytes[offset..offset + len],
        pos: RECORD_HEADER,
        offset,
    };

    let insn = if kind.is_sync() {
        let raw = r.u32()?;
        let flag = SyncFlag::unpack(raw).ok_or_else(|| r.malformed("unknown sync queue"))?;
        VirtualInstruction::new(kind, 0, Vec::new(), 1, 1, Extras::Sync(flag))
    } else {
        use InstructionKind as K;
        let dst = r.u64()?;
        let srcs = (0..kind.arity())
            .map(|_| r.u64())
            .collect::<Result<Vec<_>, _>>()?;
        let tile_size = r.u32()?;
        let total_size = r.u32()?;
        let extras = match kind {
            K::Load | K::Store => Extras::Mem {
                tile_stride: r.u32()?,
                dtype: r.dtype()?,
            },
            K::ViewLoad | K::ViewStore => {
                let dtype = r.dtype()?;
                let mode = r.u32()?;
                let swizzle = r.u32()?;
                let rows = r.u32()?;
                let cols = r.u32()?;
                let mode = match mode {
                    0 => ViewMode::Flat,
                    1 => ViewMode::Grid {
                        swizzle: Swizzle::from_code(swizzle)
                            .ok_or_else(|| r.malformed("unknown swizzle"))?,
                        rows,
                        cols,
                    },
                    _ => return Err(r.malformed("unknown view mode")),
                };
                let strides = r.array()?;
                let sizes = r.array()?;
                let extents = r.array()?;
                let anchors = r.array()?.into_iter().map(Anchor::from_code).collect();
                Extras::View(ViewSpec {
                    dtype,
                    mode,
                    strides,
                    sizes,
                    extents,
                    anchors,
                })
            }
            K::Adds | K::Muls => Extras::Scalar(f64::from_bits(r.u64()?)),
            K::Cmp => {
                let c = r.u32()?;
                Extras::Cmp(CmpType::from_code(c).ok_or_else(|| r.malformed("unknown cmp_type"))?)
            }
            K::Cast => Extras::Cast {
                from: r.dtype()?,
                to: r.dtype()?,
            },
            K::Broadcast | K::Sum | K::ReduceMax | K::ReduceMin => Extras::Shape3 {
                m: r.u32()?,
                size: r.u32()?,
                n: r.u32()?,
            },
            K::Matmul => {
                let (m, k, n) = (r.u32()?, r.u32()?, r.u32()?);
                let accumulate = match r.u32()? {
                    0 => false,
                    1 => true,
                    _ => return Err(r.malformed("accumulate flag is not 0/1")),
                };
                Extras::Matmul {
                    m,
                    k,
                    n,
                    accumulate,
                }
            }
            _ => Extras::None,
        };
        VirtualInstruction::new(kind, dst, srcs, tile_size, total_size, extras)
    };

    // Everything after the operands must be alignment padding.
    if r.pos.next_multiple_of(4) != len || r.rec[r.pos..].iter().any(|&b| b != 0) {
        return Err(r.malformed("Insn_Len disagrees with operand count"));
    }
    insn.validate()
        .map_err(|e| DecodeError::Invalid { offset, source: e })?;
    Ok((insn, len))
}

/// Serializes a header and body; `code_size` is computed from the body.
pub fn encode_program(
    header: ProgramHeader,
    insns: &[VirtualInstruction],
) -> Result<BytecodeProgram, EncodeError> {
    if insns.is_empty() {
        return Err(EncodeError::EmptyProgram);
    }
    if header.total_tiles == 0 || header.block_dim == 0 {
        return Err(EncodeError::BadHeader);
    }
    let mut body = Vec::with_capacity(insns.len() * 40);
    for insn in insns {
        body.extend(encode_instruction(insn)?);
    }
    let code_size = u32::try_from(body.len()).map_err(|_| EncodeError::BadHeader)?;
    Ok(BytecodeProgram {
        header: ProgramHeader {
            code_size,
            ..header
        },
        body,
    })
}

/// Decodes the whole body. An empty body is an error.
pub fn decode_program(program: &BytecodeProgram) -> Result<Vec<VirtualInstruction>, DecodeError> {
    if program.body.is_empty() {
        return Err(DecodeError::EmptyBody);
    }
    if program.header.code_size as usize != program.body.len() {
        return Err(DecodeError::BadHeader {
            field: "code_size",
            value: program.header.code_size,
        });
    }
    program.walk().map(|r| r.map(|(_, insn, _)| insn)).collect()
}
