//! Instruction semantics and the dispatch table.

use std::collections::HashMap;

use crate::error::VmError;
use crate::isa::{
    Anchor, CmpType, Extras, InstructionKind as K, ViewMode, ViewSpec, VirtualInstruction,
};
use crate::scalar::{Dtype, Scalar};

/// Mutable state an instruction sees while running on one core.
pub(crate) struct Ctx<'a> {
    pub local: &'a mut [u8],
    pub tags: &'a mut HashMap<u64, Dtype>,
    pub global: &'a [u8],
    /// Buffered global writes, applied after the whole dispatch.
    pub writes: &'a mut Vec<(u64, Vec<u8>)>,
    pub bytes_moved: &'a mut u64,
}

pub(crate) type ExecFn = fn(&VirtualInstruction, u64, &mut Ctx<'_>) -> Result<(), VmError>;

const TABLE_LEN: usize = 64;

const fn build_table() -> [Option<ExecFn>; TABLE_LEN] {
    let mut t: [Option<ExecFn>; TABLE_LEN] = [None; TABLE_LEN];
    t[K::Load as usize] = Some(exec_load as ExecFn);
    t[K::ViewLoad as usize] = Some(exec_view_load as ExecFn);
    t[K::Store as usize] = Some(exec_store as ExecFn);
    t[K::ViewStore as usize] = Some(exec_view_store as ExecFn);
    t[K::Copy as usize] = Some(exec_unary as ExecFn);
    t[K::Broadcast as usize] = Some(exec_broadcast as ExecFn);
    t[K::Sqrt as usize] = Some(exec_unary as ExecFn);
    t[K::Abs as usize] = Some(exec_unary as ExecFn);
    t[K::Log as usize] = Some(exec_unary as ExecFn);
    t[K::Exp as usize] = Some(exec_unary as ExecFn);
    t[K::Pow as usize] = Some(exec_binary as ExecFn);
    t[K::Round as usize] = Some(exec_unary as ExecFn);
    t[K::Floor as usize] = Some(exec_unary as ExecFn);
    t[K::IsFinite as usize] = Some(exec_unary as ExecFn);
    t[K::Adds as usize] = Some(exec_unary as ExecFn);
    t[K::Muls as usize] = Some(exec_unary as ExecFn);
    t[K::Add as usize] = Some(exec_binary as ExecFn);
    t[K::Sub as usize] = Some(exec_binary as ExecFn);
    t[K::Mul as usize] = Some(exec_binary as ExecFn);
    t[K::Div as usize] = Some(exec_binary as ExecFn);
    t[K::Min as usize] = Some(exec_binary as ExecFn);
    t[K::Max as usize] = Some(exec_binary as ExecFn);
    t[K::Cmp as usize] = Some(exec_binary as ExecFn);
    t[K::Cast as usize] = Some(exec_cast as ExecFn);
    t[K::Sum as usize] = Some(exec_reduce as ExecFn);
    t[K::ReduceMax as usize] = Some(exec_reduce as ExecFn);
    t[K::ReduceMin as usize] = Some(exec_reduce as ExecFn);
    t[K::Select as usize] = Some(exec_select as ExecFn);
    t[K::Matmul as usize] = Some(exec_matmul as ExecFn);
    t[K::SyncSet as usize] = Some(exec_sync as ExecFn);
    t[K::SyncWait as usize] = Some(exec_sync as ExecFn);
    t
}

/// Instruction functions indexed by `Insn_ID`.
pub(crate) static DISPATCH: [Option<ExecFn>; TABLE_LEN] = build_table();

pub(crate) fn lookup(kind: K) -> ExecFn {
    DISPATCH[kind.id() as usize].expect("every instruction kind has a handler")
}

fn oob(space: &'static str, start: u64, len: u64, size: usize) -> VmError {
    VmError::OutOfBounds {
        space,
        start,
        end: start + len,
        size: size as u64,
    }
}

fn effective(insn: &VirtualInstruction, tile: u64) -> Result<usize, VmError> {
    match insn.effective_size(tile) {
        0 => Err(VmError::Exec(format!(
            "{} has no elements for tile {tile} (total {})",
            insn.kind, insn.total_size
        ))),
        n => Ok(n as usize),
    }
}

impl Ctx<'_> {
    fn local_range(&self, addr: u64, bytes: usize) -> Result<std::ops::Range<usize>, VmError> {
        let start = addr as usize;
        if addr
            .checked_add(bytes as u64)
            .is_none_or(|e| e > self.local.len() as u64)
        {
            return Err(oob("local", addr, bytes as u64, self.local.len()));
        }
        Ok(start..start + bytes)
    }

    fn tag(&self, addr: u64) -> Result<Dtype, VmError> {
        self.tags
            .get(&addr)
            .copied()
            .ok_or(VmError::UntypedLocal(addr))
    }

    fn read(&self, addr: u64, n: usize, dtype: Dtype) -> Result<Vec<f64>, VmError> {
        let w = dtype.bytes();
        let r = self.local_range(addr, n * w)?;
        Ok(self.local[r]
            .chunks_exact(w)
            .map(|c| dtype.read(c))
            .collect())
    }

    fn write(&mut self, addr: u64, dtype: Dtype, values: &[f64]) -> Result<(), VmError> {
        let w = dtype.bytes();
        let r = self.local_range(addr, values.len() * w)?;
        for (c, &v) in self.local[r].chunks_exact_mut(w).zip(values) {
            dtype.write(c, v);
        }
        self.tags.insert(addr, dtype);
        Ok(())
    }

    fn global_bytes(&self, addr: u64, len: usize) -> Result<&[u8], VmError> {
        if addr
            .checked_add(len as u64)
            .is_none_or(|e| e > self.global.len() as u64)
        {
            return Err(oob("global", addr, len as u64, self.global.len()));
        }
        Ok(&self.global[addr as usize..addr as usize + len])
    }

    fn check_global(&self, addr: u64, len: usize) -> Result<(), VmError> {
        self.global_bytes(addr, len).map(|_| ())
    }

    fn push_write(&mut self, addr: u64, bytes: &[u8]) {
        if let Some((a, buf)) = self.writes.last_mut() {
            if *a + buf.len() as u64 == addr {
                buf.extend_from_slice(bytes);
                return;
            }
        }
        self.writes.push((addr, bytes.to_vec()));
    }
}

fn mem_operands(insn: &VirtualInstruction) -> Result<(u32, Dtype), VmError> {
    match insn.extras {
        Extras::Mem { tile_stride, dtype } => Ok((tile_stride, dtype)),
        _ => Err(VmError::Exec(format!(
            "{} without memory operands",
            insn.kind
        ))),
    }
}

fn exec_load(insn: &VirtualInstruction, tile: u64, ctx: &mut Ctx<'_>) -> Result<(), VmError> {
    let (stride, dtype) = mem_operands(insn)?;
    let n = effective(insn, tile)?;
    let w = dtype.bytes();
    let src = insn.srcs[0] + tile * stride as u64 * w as u64;
    let r = ctx.local_range(insn.dst, n * w)?;
    let bytes = ctx.global_bytes(src, n * w)?.to_vec();
    ctx.local[r].copy_from_slice(&bytes);
    ctx.tags.insert(insn.dst, dtype);
    *ctx.bytes_moved += (n * w) as u64;
    Ok(())
}

fn exec_store(insn: &VirtualInstruction, tile: u64, ctx: &mut Ctx<'_>) -> Result<(), VmError> {
    let (stride, dtype) = mem_operands(insn)?;
    let n = effective(insn, tile)?;
    let w = dtype.bytes();
    let dst = insn.dst + tile * stride as u64 * w as u64;
    ctx.check_global(dst, n * w)?;
    let r = ctx.local_range(insn.srcs[0], n * w)?;
    let bytes = ctx.local[r].to_vec();
    ctx.push_write(dst, &bytes);
    *ctx.bytes_moved += (n * w) as u64;
    Ok(())
}

fn view_of(insn: &VirtualInstruction) -> Result<&ViewSpec, VmError> {
    match &insn.extras {
        Extras::View(v) => Ok(v),
        _ => Err(VmError::Exec(format!(
            "{} without view operands",
            insn.kind
        ))),
    }
}

/// Element offsets (relative to the view base, `None` when out of extents) of
/// the `n` local elements tile `tile` covers.
pub(crate) fn view_offsets(
    view: &ViewSpec,
    tile: u64,
    start: usize,
    n: usize,
) -> Result<Vec<Option<u64>>, VmError> {
    let d = view.sizes.len();
    let mut out = Vec::with_capacity(n);
    match view.mode {
        ViewMode::Flat => {
            let mut coord = vec![0u64; d];
            for f in start..start + n {
                let mut rem = f as u64;
                for k in (0..d).rev() {
                    coord[k] = rem % view.sizes[k] as u64;
                    rem /= view.sizes[k] as u64;
                }
                if rem != 0 {
                    return Err(VmError::Exec("flat view index past its shape".into()));
                }
                out.push(Some(
                    coord
                        .iter()
                        .zip(&view.strides)
                        .map(|(c, &s)| c * s as u64)
                        .sum(),
                ));
            }
        }
        ViewMode::Grid {
            swizzle,
            rows,
            cols,
        } => {
            if tile >= rows as u64 * cols as u64 {
                return Err(VmError::Exec(format!(
                    "tile {tile} outside a {rows}x{cols} grid"
                )));
            }
            let (ti, tj) = swizzle.coords(tile as usize, rows as usize, cols as usize);
            let origin: Vec<u64> = view
                .anchors
                .iter()
                .zip(&view.sizes)
                .map(|(a, &s)| {
                    let block = match a {
                        Anchor::Row => ti as u64,
                        Anchor::Col => tj as u64,
                        Anchor::Fixed(b) => *b as u64,
                    };
                    block * s as u64
                })
                .collect();
            let mut coord = vec![0u64; d];
            for f in start..start + n {
                let mut rem = f as u64;
                for k in (0..d).rev() {
                    coord[k] = rem % view.sizes[k] as u64;
                    rem /= view.sizes[k] as u64;
                }
                let mut offset = 0u64;
                let mut inside = true;
                for k in 0..d {
                    let g = origin[k] + coord[k];
                    if g >= view.extents[k] as u64 {
                        inside = false;
                        break;
                    }
                    offset += g * view.strides[k] as u64;
                }
                out.push(inside.then_some(offset));
            }
        }
    }
    Ok(out)
}

fn exec_view_load(insn: &VirtualInstruction, tile: u64, ctx: &mut Ctx<'_>) -> Result<(), VmError> {
    let view = view_of(insn)?;
    let n = effective(insn, tile)?;
    let w = view.dtype.bytes();
    let start = tile as usize * insn.tile_size as usize;
    let offsets = view_offsets(view, tile, start, n)?;
    let r = ctx.local_range(insn.dst, n * w)?;
    let mut buf = vec![0u8; n * w];
    let mut moved = 0u64;
    for (k, off) in offsets.iter().enumerate() {
        if let Some(off) = off {
            let src = ctx.global_bytes(insn.srcs[0] + off * w as u64, w)?;
            buf[k * w..(k + 1) * w].copy_from_slice(src);
            moved += w as u64;
        }
    }
    ctx.local[r].copy_from_slice(&buf);
    ctx.tags.insert(insn.dst, view.dtype);
    *ctx.bytes_moved += moved;
    Ok(())
}

fn exec_view_store(insn: &VirtualInstruction, tile: u64, ctx: &mut Ctx<'_>) -> Result<(), VmError> {
    let view = view_of(insn)?;
    let n = effective(insn, tile)?;
    let w = view.dtype.bytes();
    let start = tile as usize * insn.tile_size as usize;
    let offsets = view_offsets(view, tile, start, n)?;
    let r = ctx.local_range(insn.srcs[0], n * w)?;
    let local = ctx.local[r].to_vec();
    for (k, off) in offsets.iter().enumerate() {
        if let Some(off) = off {
            let dst = insn.dst + off * w as u64;
            ctx.check_global(dst, w)?;
            ctx.push_write(dst, &local[k * w..(k + 1) * w]);
            *ctx.bytes_moved += w as u64;
        }
    }
    Ok(())
}

fn unary_math<T: Scalar>(kind: K, x: T, scalar: f64) -> T {
    match kind {
        K::Sqrt => x.sqrt(),
        K::Abs => x.abs(),
        K::Log => x.ln(),
        K::Exp => x.exp(),
        K::Round => x.round(),
        K::Floor => x.floor(),
        K::IsFinite => {
            if x.is_finite() {
                T::one()
            } else {
                T::zero()
            }
        }
        K::Adds => x + T::from_f64_lossy(scalar),
        K::Muls => x * T::from_f64_lossy(scalar),
        _ => x,
    }
}

fn binary_math<T: Scalar>(kind: K, a: T, b: T, cmp: Option<CmpType>) -> T {
    match kind {
        K::Add => a + b,
        K::Sub => a - b,
        K::Mul => a * b,
        K::Div => a / b,
        K::Min => a.min(b),
        K::Max => a.max(b),
        K::Pow => a.powf(b),
        K::Cmp => {
            if cmp.expect("cmp operand").apply(a.as_f64(), b.as_f64()) {
                T::one()
            } else {
                T::zero()
            }
        }
        _ => unreachable!("not a binary kind"),
    }
}

/// Element-wise map computed in the dtype's working precision: f32 for f16,
/// f64 otherwise, then rounded to the storage type.
fn map_in<T: Scalar>(dtype: Dtype, f: impl Fn(&[T]) -> T, cols: &[Vec<f64>]) -> Vec<f64> {
    let n = cols[0].len();
    let mut args = vec![T::zero(); cols.len()];
    (0..n)
        .map(|i| {
            for (a, c) in args.iter_mut().zip(cols) {
                *a = T::from_f64_lossy(c[i]);
            }
            dtype.quantize(f(&args).as_f64())
        })
        .collect()
}

fn exec_unary(insn: &VirtualInstruction, tile: u64, ctx: &mut Ctx<'_>) -> Result<(), VmError> {
    let n = effective(insn, tile)?;
    let dtype = ctx.tag(insn.srcs[0])?;
    let x = ctx.read(insn.srcs[0], n, dtype)?;
    let scalar = match insn.extras {
        Extras::Scalar(s) => s,
        _ => 0.0,
    };
    let kind = insn.kind;
    let y = if dtype == Dtype::F16 {
        map_in::<f32>(dtype, |a| unary_math(kind, a[0], scalar), &[x])
    } else {
        map_in::<f64>(dtype, |a| unary_math(kind, a[0], scalar), &[x])
    };
    ctx.write(insn.dst, dtype, &y)
}

fn exec_binary(insn: &VirtualInstruction, tile: u64, ctx: &mut Ctx<'_>) -> Result<(), VmError> {
    let n = effective(insn, tile)?;
    let dtype = ctx.tag(insn.srcs[0])?;
    let other = ctx.tag(insn.srcs[1])?;
    if other != dtype {
        return Err(VmError::Exec(format!(
            "{} operands are {dtype} and {other}",
            insn.kind
        )));
    }
    let a = ctx.read(insn.srcs[0], n, dtype)?;
    let b = ctx.read(insn.srcs[1], n, dtype)?;
    let cmp = match insn.extras {
        Extras::Cmp(c) => Some(c),
        _ => None,
    };
    let kind = insn.kind;
    let cols = [a, b];
    let y = if dtype == Dtype::F16 {
        map_in::<f32>(dtype, |v| binary_math(kind, v[0], v[1], cmp), &cols)
    } else {
        map_in::<f64>(dtype, |v| binary_math(kind, v[0], v[1], cmp), &cols)
    };
    ctx.write(insn.dst, dtype, &y)
}

fn exec_select(insn: &VirtualInstruction, tile: u64, ctx: &mut Ctx<'_>) -> Result<(), VmError> {
    let n = effective(insn, tile)?;
    let cond_t = ctx.tag(insn.srcs[0])?;
    let dtype = ctx.tag(insn.srcs[1])?;
    if ctx.tag(insn.srcs[2])? != dtype {
        return Err(VmError::Exec("select branches differ in dtype".into()));
    }
    let c = ctx.read(insn.srcs[0], n, cond_t)?;
    let a = ctx.read(insn.srcs[1], n, dtype)?;
    let b = ctx.read(insn.srcs[2], n, dtype)?;
    let y: Vec<f64> = (0..n)
        .map(|i| if c[i] != 0.0 { a[i] } else { b[i] })
        .collect();
    ctx.write(insn.dst, dtype, &y)
}

fn exec_cast(insn: &VirtualInstruction, tile: u64, ctx: &mut Ctx<'_>) -> Result<(), VmError> {
    let Extras::Cast { from, to } = insn.extras else {
        return Err(VmError::Exec("cast without dtypes".into()));
    };
    let actual = ctx.tag(insn.srcs[0])?;
    if actual != from {
        return Err(VmError::Cast {
            from: format!("{actual} (declared {from})"),
            to: to.to_string(),
        });
    }
    let n = effective(insn, tile)?;
    let x = ctx.read(insn.srcs[0], n, from)?;
    let y: Vec<f64> = x.iter().map(|&v| to.quantize(v)).collect();
    ctx.write(insn.dst, to, &y)
}

fn shape3(insn: &VirtualInstruction, eff: usize) -> Result<(usize, usize, usize), VmError> {
    let Extras::Shape3 { size, n, .. } = insn.extras else {
        return Err(VmError::Exec(format!("{} without (M, size, N)", insn.kind)));
    };
    let (size, n) = (size as usize, n as usize);
    if size == 0 || n == 0 || !eff.is_multiple_of(size * n) {
        return Err(VmError::Exec(format!(
            "{} tile of {eff} elements is not a whole number of [{size}, {n}] blocks",
            insn.kind
        )));
    }
    Ok((eff / (size * n), size, n))
}

fn reduce_in<T: Scalar>(
    kind: K,
    x: &[f64],
    dtype: Dtype,
    m: usize,
    size: usize,
    n: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::from_f64_lossy(x[i * size * n + j]);
            for s in 1..size {
                let v = T::from_f64_lossy(x[(i * size + s) * n + j]);
                acc = match kind {
                    K::Sum => acc + v,
                    K::ReduceMax => acc.max(v),
                    _ => acc.min(v),
                };
            }
            out.push(dtype.quantize(acc.as_f64()));
        }
    }
    out
}

fn exec_reduce(insn: &VirtualInstruction, tile: u64, ctx: &mut Ctx<'_>) -> Result<(), VmError> {
    let eff = effective(insn, tile)?;
    let (m, size, n) = shape3(insn, eff)?;
    let dtype = ctx.tag(insn.srcs[0])?;
    let x = ctx.read(insn.srcs[0], eff, dtype)?;
    let y = if dtype == Dtype::F16 {
        reduce_in::<f32>(insn.kind, &x, dtype, m, size, n)
    } else {
        reduce_in::<f64>(insn.kind, &x, dtype, m, size, n)
    };
    ctx.write(insn.dst, dtype, &y)
}

fn exec_broadcast(insn: &VirtualInstruction, tile: u64, ctx: &mut Ctx<'_>) -> Result<(), VmError> {
    let eff = effective(insn, tile)?;
    let (m, size, n) = shape3(insn, eff)?;
    let dtype = ctx.tag(insn.srcs[0])?;
    let x = ctx.read(insn.srcs[0], m * n, dtype)?;
    let mut y = Vec::with_capacity(eff);
    for i in 0..m {
        for _ in 0..size {
            y.extend_from_slice(&x[i * n..(i + 1) * n]);
        }
    }
    ctx.write(insn.dst, dtype, &y)
}

fn exec_matmul(insn: &VirtualInstruction, _tile: u64, ctx: &mut Ctx<'_>) -> Result<(), VmError> {
    let Extras::Matmul {
        m,
        k,
        n,
        accumulate,
    } = insn.extras
    else {
        return Err(VmError::Exec("matmul without (m, k, n)".into()));
    };
    let (m, k, n) = (m as usize, k as usize, n as usize);
    let dtype = ctx.tag(insn.srcs[0])?;
    let a = ctx.read(insn.srcs[0], m * k, dtype)?;
    let b = ctx.read(insn.srcs[1], k * n, ctx.tag(insn.srcs[1])?)?;
    let prev = if accumulate {
        Some(ctx.read(insn.dst, m * n, ctx.tag(insn.dst)?)?)
    } else {
        None
    };
    let mut c = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f32;
            for p in 0..k {
                acc += a[i * k + p] as f32 * b[p * n + j] as f32;
            }
            if let Some(prev) = &prev {
                acc += prev[i * n + j] as f32;
            }
            c[i * n + j] = dtype.quantize(acc as f64);
        }
    }
    ctx.write(insn.dst, dtype, &c)
}

fn exec_sync(_insn: &VirtualInstruction, _tile: u64, _ctx: &mut Ctx<'_>) -> Result<(), VmError> {
    Ok(())
}
