use std::collections::HashMap;

use crate::error::TileError;
use crate::graph::{peak_live_count, OperatorGraph, TensorId};
use crate::isa::Swizzle;

use super::{tiling_cost_with, DeviceConfig, TensorSpace, TiledGraph, TilingKind};

/// 2-D output tiling of a matmul, optionally followed by an element-wise chain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatmulTiling {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub tm: usize,
    pub tn: usize,
    pub tk: usize,
    pub k_chunks: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub swizzle: Swizzle,
    /// Uniform tile buffers reserved for the matmul output and the chain.
    pub chain_slots: usize,
    /// Bytes of the A and B operand slabs.
    pub slab_bytes: usize,
    pub local_bytes: usize,
}

impl MatmulTiling {
    /// `(row block, column block)` visited at linear tile `i`.
    pub fn coords(&self, i: usize) -> (usize, usize) {
        self.swizzle.coords(i, self.grid_rows, self.grid_cols)
    }

    /// Effective rows and columns of tile `i`; tails are not padded.
    pub fn effective(&self, i: usize) -> (usize, usize) {
        let (r, c) = self.coords(i);
        (
            self.tm.min(self.m - r * self.tm),
            self.tn.min(self.n - c * self.tn),
        )
    }
}

struct Shape {
    ab: usize,
    chain_bytes: usize,
    slots: usize,
}

impl Shape {
    fn need(&self, tm: usize, tn: usize, tk: usize) -> usize {
        (tm * tk + tk * tn) * self.ab + self.slots * tm * tn * self.chain_bytes
    }
}

/// Operand reloads a core would issue walking its tile range in `swizzle` order,
/// counting a reload whenever the row (A) or column (B) block changes.
pub(crate) fn reload_bytes(
    swizzle: Swizzle,
    rows: usize,
    cols: usize,
    n_cores: usize,
    a_panel: usize,
    b_panel: usize,
) -> usize {
    let tiles = rows * cols;
    let block_dim = n_cores.min(tiles).max(1);
    let per = tiles.div_ceil(block_dim);
    let mut bytes = 0;
    for core in 0..block_dim {
        let (mut last_r, mut last_c) = (usize::MAX, usize::MAX);
        for i in per * core..tiles.min(per * (core + 1)) {
            let (r, c) = swizzle.coords(i, rows, cols);
            if r != last_r {
                bytes += a_panel;
            }
            if c != last_c {
                bytes += b_panel;
            }
            (last_r, last_c) = (r, c);
        }
    }
    bytes
}

fn validate_group(g: &OperatorGraph) -> Result<(usize, usize, usize), TileError> {
    let unsupported = |s: String| Err(TileError::Unsupported(s));
    let Some(first) = g.ops.first() else {
        return unsupported("empty group".into());
    };
    if !first.kind.is_matmul() {
        return unsupported("a cube group starts with its matmul".into());
    }
    let a = g.tensor(first.inputs[0]).concrete_shape()?;
    let b = g.tensor(first.inputs[1]).concrete_shape()?;
    let (m, k, n) = (a[0], a[1], b[1]);
    let mut produced = vec![first.output];
    for op in &g.ops[1..] {
        if !op.kind.is_elementwise() {
            return unsupported(format!(
                "{} cannot follow a matmul in one group",
                op.kind.name()
            ));
        }
        if g.tensor(op.output).concrete_shape()? != [m, n] {
            return unsupported(format!(
                "`{}` does not match the matmul output shape",
                g.tensor(op.output).name
            ));
        }
        if !op.inputs.iter().any(|t| produced.contains(t)) {
            return unsupported(format!(
                "{} does not consume the matmul chain",
                op.kind.name()
            ));
        }
        for t in &op.inputs {
            if !produced.contains(t) && g.tensor(*t).shape.len() > 2 {
                return unsupported(format!("`{}` has rank > 2", g.tensor(*t).name));
            }
        }
        produced.push(op.output);
    }
    Ok((m, k, n))
}

/// Output tiling of a lone matmul.
/// `(tiles, k chunks, tile area, larger tm first)`; smaller is better.
type TileKey = (usize, usize, usize, std::cmp::Reverse<usize>);

pub fn tile_matmul(g: &OperatorGraph, cfg: &DeviceConfig) -> Result<TiledGraph, TileError> {
    if g.ops.len() != 1 {
        return Err(TileError::Unsupported("expected a single matmul".into()));
    }
    tile_cube_vector(g, cfg)
}

/// Joint tiling of a matmul and the element-wise ops consuming its output.
pub fn tile_cube_vector(g: &OperatorGraph, cfg: &DeviceConfig) -> Result<TiledGraph, TileError> {
    cfg.validate()?;
    let (m, k, n) = validate_group(g)?;
    let mm = &g.ops[0];
    let ab = g.tensor(mm.inputs[0]).dtype.bytes();
    let chain: Vec<usize> = (1..g.ops.len()).collect();
    let chain_graph = g.subgraph(&chain, vec![]);
    let slots = if chain.is_empty() {
        1
    } else {
        peak_live_count(&chain_graph)
    };
    let chain_bytes = g
        .ops
        .iter()
        .flat_map(|op| {
            let inputs: &[TensorId] = if op.kind.is_matmul() { &[] } else { &op.inputs };
            inputs.iter().chain(std::iter::once(&op.output))
        })
        .map(|&t| g.tensor(t).dtype.bytes())
        .max()
        .unwrap_or(ab);
    let shape = Shape {
        ab,
        chain_bytes,
        slots,
    };
    let align = cfg.cube_align;
    let mut tk_options = vec![k];
    let mut c = (k - 1) / align * align;
    while c >= align {
        tk_options.push(c);
        c -= align;
    }
    let mut best: Option<(TileKey, (usize, usize, usize))> = None;
    for tm in (1..=m.div_ceil(align)).map(|i| i * align) {
        for tn in (1..=n.div_ceil(align)).map(|i| i * align) {
            let Some(&tk) = tk_options
                .iter()
                .find(|&&tk| shape.need(tm, tn, tk) <= cfg.local_mem_bytes)
            else {
                continue;
            };
            let tiles = m.div_ceil(tm) * n.div_ceil(tn);
            let key = (tiles, k.div_ceil(tk), tm * tn, std::cmp::Reverse(tm));
            if best.as_ref().is_none_or(|(bk, _)| key < *bk) {
                best = Some((key, (tm, tn, tk)));
            }
        }
    }
    let Some((_, (tm, tn, tk))) = best else {
        return Err(TileError::Infeasible(format!(
            "no {align}x{align} matmul tile fits in {} B of local memory",
            cfg.local_mem_bytes
        )));
    };
    let (rows, cols) = (m.div_ceil(tm), n.div_ceil(tn));
    let swizzle = Swizzle::ALL
        .into_iter()
        .min_by_key(|&s| reload_bytes(s, rows, cols, cfg.num_cores, tm * k * ab, k * tn * ab))
        .unwrap();
    let slab_bytes = (tm * tk + tk * tn) * ab;
    let tiling = MatmulTiling {
        m,
        k,
        n,
        tm,
        tn,
        tk,
        k_chunks: k.div_ceil(tk),
        grid_rows: rows,
        grid_cols: cols,
        swizzle,
        chain_slots: slots,
        slab_bytes,
        local_bytes: shape.need(tm, tn, tk),
    };
    let tiles = rows * cols;
    let tile_elems = tm * tn;
    let tail = (m - (rows - 1) * tm) * (n - (cols - 1) * tn);
    let t_max = (cfg.local_mem_bytes - slab_bytes) / (slots * chain_bytes);
    let cost = tiles.div_ceil(cfg.num_cores) as u64 * (tile_elems as u64 + cfg.tile_overhead);
    debug_assert_eq!(
        cost,
        tiling_cost_with(
            tile_elems,
            tiles * tile_elems,
            cfg.num_cores,
            cfg.tile_overhead
        )
    );
    let spaces: HashMap<TensorId, TensorSpace> = g
        .ops
        .iter()
        .flat_map(|op| op.inputs.iter().chain(std::iter::once(&op.output)))
        .map(|&t| (t, TensorSpace::Full))
        .collect();
    Ok(TiledGraph {
        graph: g.clone(),
        kind: TilingKind::Cube(tiling),
        dominant: vec![m, n],
        tile_elems,
        total_elems: m * n,
        tiles,
        tail,
        t_max,
        live_peak: slots,
        elem_bytes: chain_bytes,
        best_size: tile_elems,
        best_cost: cost,
        cost,
        op_tiles: vec![tile_elems; g.ops.len()],
        spaces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{dims, GraphBuilder, OpKind};
    use crate::scalar::Dtype;

    fn matmul(m: usize, k: usize, n: usize) -> GraphBuilder {
        let mut g = GraphBuilder::new();
        let a = g.input("a", Dtype::F32, dims(&[m, k])).unwrap();
        let b = g.input("b", Dtype::F32, dims(&[k, n])).unwrap();
        g.op_named(OpKind::Matmul, &[a, b], "c").unwrap();
        g
    }

    fn with_mem(bytes: usize) -> DeviceConfig {
        DeviceConfig {
            local_mem_bytes: bytes,
            ..DeviceConfig::default()
        }
    }

    #[test]
    fn ample_memory_single_tile() {
        let tg = tile_matmul(&matmul(32, 32, 32).build(), &DeviceConfig::default()).unwrap();
        let t = tg.matmul().unwrap();
        assert_eq!((t.tm, t.tn, t.tk, tg.tiles), (32, 32, 32, 1));
    }

    #[test]
    fn memory_cap_forces_four_tiles_row_major() {
        // A 32x32 tile with a full k slab: (32*32 + 32*32 + 32*32) * 4 bytes.
        let tg = tile_matmul(&matmul(64, 32, 64).build(), &with_mem(12288)).unwrap();
        let t = tg.matmul().unwrap();
        assert_eq!((t.tm, t.tn, tg.tiles), (32, 32, 4));
        assert_eq!(t.swizzle, Swizzle::RowMajor);
        let order: Vec<_> = (0..4).map(|i| t.coords(i)).collect();
        assert_eq!(order, [(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn ragged_rows_are_not_padded() {
        let tg = tile_matmul(&matmul(17, 16, 16).build(), &DeviceConfig::default()).unwrap();
        let t = tg.matmul().unwrap();
        assert_eq!((t.tm, tg.tiles), (32, 1));
        assert_eq!(t.effective(0), (17, 16));
        // 16x16 output tiles only.
        let tg = tile_matmul(&matmul(17, 16, 16).build(), &with_mem(3 * 256 * 4)).unwrap();
        let t = tg.matmul().unwrap();
        assert_eq!((t.tm, tg.tiles), (16, 2));
        assert_eq!(t.effective(1), (1, 16));
    }

    #[test]
    fn k_is_split_when_slabs_do_not_fit() {
        let tg = tile_matmul(&matmul(16, 256, 16).build(), &with_mem(8 * 1024)).unwrap();
        let t = tg.matmul().unwrap();
        assert!(t.k_chunks > 1);
        assert!(t.local_bytes <= 8 * 1024);
        assert!(matches!(
            tile_matmul(&matmul(16, 256, 16).build(), &with_mem(1024)),
            Err(TileError::Infeasible(_))
        ));
    }

    #[test]
    fn chain_buffers_shrink_the_tile() {
        let bare = tile_cube_vector(&matmul(64, 64, 64).build(), &with_mem(16 * 1024)).unwrap();
        let mut g = matmul(64, 64, 64);
        let c = g.find("c").unwrap();
        let x = g.input("x", Dtype::F32, dims(&[64, 64])).unwrap();
        let s = g.op(OpKind::Sqrt, &[c]).unwrap();
        g.op(OpKind::Add, &[s, x]).unwrap();
        let chained = tile_cube_vector(&g.build(), &with_mem(16 * 1024)).unwrap();
        assert_eq!(chained.matmul().unwrap().chain_slots, 3);
        assert_eq!((bare.tiles, chained.tiles), (2, 4));
    }

    #[test]
    fn addmm_under_cap() {
        let mut g = matmul(64, 64, 64);
        let c = g.find("c").unwrap();
        let bias = g.input("bias", Dtype::F32, dims(&[64, 64])).unwrap();
        g.op(OpKind::Add, &[c, bias]).unwrap();
        // 32x32 tile, full k, three chain slots: (2*32*64 + 3*32*32) * 4 bytes.
        let tg = tile_cube_vector(&g.build(), &with_mem(28 * 1024)).unwrap();
        assert_eq!(tg.tiles, 4);
        assert_eq!(tg.op_tiles, vec![1024, 1024]);
    }
}
