use std::fmt::Write;

use crate::error::DecodeError;

use super::{BytecodeProgram, Extras, ViewMode, VirtualInstruction};

/// Renders a program as text: one header line, then one line per record.
///
/// ```text
/// block_dim=40 body_tile=1 vmain.aiv total_tiles=40 code_size=224
/// Load dst=0x0 src=[0x0] tile=832 total=32768 stride=832 dtype=f16
/// ```
pub fn disassemble(program: &BytecodeProgram) -> Result<String, DecodeError> {
    if program.body.is_empty() {
        return Err(DecodeError::EmptyBody);
    }
    let h = &program.header;
    let mut out = format!(
        "block_dim={} body_tile={} {} total_tiles={} code_size={}\n",
        h.block_dim,
        h.body_tile(),
        h.kernel_type.entry_name(),
        h.total_tiles,
        h.code_size
    );
    for rec in program.walk() {
        let (_, insn, _) = rec?;
        out.push_str(&format_instruction(&insn));
        out.push('\n');
    }
    Ok(out)
}

pub(crate) fn format_instruction(insn: &VirtualInstruction) -> String {
    let srcs: Vec<String> = insn.srcs.iter().map(|s| format!("{s:#x}")).collect();
    let mut line = format!(
        "{} dst={:#x} src=[{}] tile={} total={}",
        insn.kind,
        insn.dst,
        srcs.join(","),
        insn.tile_size,
        insn.total_size
    );
    let list = |v: &[u32]| {
        v.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    let _ = match &insn.extras {
        Extras::None => Ok(()),
        Extras::Mem { tile_stride, dtype } => write!(line, " stride={tile_stride} dtype={dtype}"),
        Extras::View(v) => {
            let _ = write!(line, " dtype={}", v.dtype);
            match v.mode {
                ViewMode::Flat => write!(
                    line,
                    " view=flat strides=[{}] sizes=[{}]",
                    list(&v.strides),
                    list(&v.sizes)
                ),
                ViewMode::Grid {
                    swizzle,
                    rows,
                    cols,
                } => {
                    let anchors: Vec<u32> = v.anchors.iter().map(|a| a.code()).collect();
                    write!(
                        line,
                        " view=grid({}x{},{}) strides=[{}] sizes=[{}] extents=[{}] anchors=[{}]",
                        rows,
                        cols,
                        swizzle.name(),
                        list(&v.strides),
                        list(&v.sizes),
                        list(&v.extents),
                        list(&anchors)
                    )
                }
            }
        }
        Extras::Scalar(s) => write!(line, " scalar={s}"),
        Extras::Cmp(c) => write!(line, " cmp={}", c.name()),
        Extras::Cast { from, to } => write!(line, " from={from} to={to}"),
        Extras::Shape3 { m, size, n } => write!(line, " M={m} size={size} N={n}"),
        Extras::Matmul {
            m,
            k,
            n,
            accumulate,
        } => {
            write!(line, " m={m} k={k} n={n} acc={}", *accumulate as u8)
        }
        Extras::Sync(f) => write!(
            line,
            " event={} {}->{}",
            f.event,
            f.from.name(),
            f.to.name()
        ),
    };
    line
}
