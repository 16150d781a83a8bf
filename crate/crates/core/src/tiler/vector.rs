use std::collections::HashMap;

use crate::error::TileError;
use crate::graph::{
    dims, dominant_shape, peak_live_count, OpKind, OperatorGraph, SymDim, TensorId,
};

use super::{align_search, tiling_cost_with, DeviceConfig, TiledGraph, TilingKind};

/// How the dominant iteration space is cut.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VectorLayout {
    /// The whole space is flattened to one dimension.
    Flat,
    /// The last axis (`width` elements) is kept whole; tiles are runs of rows.
    Rows { width: usize },
}

/// Which iteration space a tile buffer lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TensorSpace {
    /// Covers the dominant shape.
    Full,
    /// Dominant shape with the last axis reduced to 1.
    Reduced,
}

/// Assigns every tensor touched by `ops` to a space over `dominant`.
///
/// Returns whether row layout is required (any reduction or broadcast op).
pub(crate) fn classify_spaces(
    g: &OperatorGraph,
    ops: &[usize],
    dominant: &[SymDim],
) -> Result<(bool, HashMap<TensorId, TensorSpace>), String> {
    let sym = &g.symbols;
    let rows = ops.iter().any(|&i| g.ops[i].kind.is_axis_op());
    let width = dominant.last().cloned().unwrap_or(SymDim::Const(1));
    let reducible = rows && !width.is_one();
    let mut reduced = dominant.to_vec();
    if let Some(d) = reduced.last_mut() {
        *d = SymDim::Const(1);
    }
    let mut spaces: HashMap<TensorId, TensorSpace> = HashMap::new();
    for &i in ops {
        let op = &g.ops[i];
        let out = &g.tensor(op.output).shape;
        let space = if sym.shapes_equal(out, dominant) {
            TensorSpace::Full
        } else if reducible && sym.shapes_equal(out, &reduced) {
            TensorSpace::Reduced
        } else {
            return Err(format!(
                "`{}` does not cover the group's iteration space",
                g.tensor(op.output).name
            ));
        };
        spaces.insert(op.output, space);
    }
    let produced: Vec<TensorId> = ops.iter().map(|&i| g.ops[i].output).collect();
    // What each op expects of its operands.
    let wanted = |i: usize, spaces: &HashMap<TensorId, TensorSpace>| -> TensorSpace {
        let op = &g.ops[i];
        match op.kind {
            OpKind::Broadcast(_) => TensorSpace::Reduced,
            OpKind::Sum | OpKind::ReduceMax | OpKind::ReduceMin => TensorSpace::Full,
            _ => spaces[&op.output],
        }
    };
    let mut external: HashMap<TensorId, TensorSpace> = HashMap::new();
    for &i in ops {
        for &t in &g.ops[i].inputs {
            if produced.contains(&t) || external.contains_key(&t) {
                continue;
            }
            let shape = &g.tensor(t).shape;
            let last_one = shape.last().is_none_or(|d| d.is_one());
            let all_reduced = ops
                .iter()
                .filter(|&&j| g.ops[j].inputs.contains(&t))
                .all(|&j| wanted(j, &spaces) == TensorSpace::Reduced);
            let space = if reducible && last_one && all_reduced {
                TensorSpace::Reduced
            } else {
                TensorSpace::Full
            };
            external.insert(t, space);
        }
    }
    spaces.extend(external);
    for &i in ops {
        let op = &g.ops[i];
        if let OpKind::Broadcast(size) = &op.kind {
            if !sym.dims_equal(size, &width) {
                return Err(format!(
                    "broadcast to {size} does not match row width {width}"
                ));
            }
        }
        if op.kind.is_reduction() && !reducible {
            return Err("reduction over a size-1 axis".into());
        }
        let want = wanted(i, &spaces);
        for &t in &op.inputs {
            if spaces[&t] != want {
                return Err(format!(
                    "`{}` feeds {} in the wrong space; broadcast reduced tensors explicitly",
                    g.tensor(t).name,
                    op.kind.name()
                ));
            }
        }
    }
    Ok((rows, spaces))
}

/// Shape tiling of a vector-only graph.
pub fn tile_vector_graph(g: &OperatorGraph, cfg: &DeviceConfig) -> Result<TiledGraph, TileError> {
    cfg.validate()?;
    if g.ops.is_empty() {
        return Err(TileError::Unsupported("empty graph".into()));
    }
    if g.has_matmul() {
        return Err(TileError::Unsupported("matmul in a vector graph".into()));
    }
    let mut dominant = dominant_shape(g)?;
    if dominant.is_empty() {
        dominant.push(1);
    }
    let total: usize = dominant.iter().product();
    let live_peak = peak_live_count(g);
    let elem_bytes = g
        .ops
        .iter()
        .flat_map(|op| op.inputs.iter().chain(std::iter::once(&op.output)))
        .map(|&t| g.tensor(t).dtype.bytes())
        .max()
        .unwrap_or(1);
    let t_max = cfg.local_mem_bytes / (live_peak * elem_bytes);
    let width_elems = cfg.width_elems(elem_bytes);
    if t_max < width_elems {
        return Err(TileError::Infeasible(format!(
            "T_max = {t_max} elements is below one {width_elems}-element vector \
             ({live_peak} live buffers of {elem_bytes} B in {} B)",
            cfg.local_mem_bytes
        )));
    }

    let all_ops: Vec<usize> = (0..g.ops.len()).collect();
    let (rows, spaces) =
        classify_spaces(g, &all_ops, &dims(&dominant)).map_err(TileError::Unsupported)?;
    let (layout, l_prime) = if rows {
        let w = *dominant.last().unwrap();
        if w > t_max {
            return Err(TileError::Unsupported(format!(
                "reduction axis of {w} elements exceeds T_max = {t_max}"
            )));
        }
        (VectorLayout::Rows { width: w }, w)
    } else {
        (VectorLayout::Flat, 1)
    };

    let n = cfg.num_cores;
    let cost_of = |size: usize| tiling_cost_with(size, total, n, cfg.tile_overhead);
    let (tile_elems, best_size, best_cost) = if total > t_max || n > 1 {
        let choice = align_search(t_max, l_prime, total, cfg, elem_bytes);
        (
            choice.multiplier * l_prime,
            choice.best_multiplier * l_prime,
            choice.best_cost,
        )
    } else {
        (total, total, cost_of(total))
    };
    let tiles = total.div_ceil(tile_elems);
    let tail = total - (tiles - 1) * tile_elems;
    let op_tiles = g
        .ops
        .iter()
        .map(|op| match spaces[&op.output] {
            TensorSpace::Full => tile_elems,
            TensorSpace::Reduced => tile_elems / l_prime,
        })
        .collect();
    Ok(TiledGraph {
        graph: g.clone(),
        kind: TilingKind::Vector(layout),
        dominant,
        tile_elems,
        total_elems: total,
        tiles,
        tail,
        t_max,
        live_peak,
        elem_bytes,
        best_size,
        best_cost,
        cost: cost_of(tile_elems),
        op_tiles,
        spaces,
    })
}
