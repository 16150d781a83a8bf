use crate::error::GraphError;

use super::{OperatorGraph, TensorId};

/// Broadcast-max over every tensor an op touches: the largest rank, and the
/// largest extent per right-aligned dimension.
pub fn dominant_shape(g: &OperatorGraph) -> Result<Vec<usize>, GraphError> {
    if g.has_matmul() {
        return Err(GraphError::Invalid(
            "dominant shape is defined for vector-only graphs".into(),
        ));
    }
    let mut dominant: Vec<usize> = Vec::new();
    let mut touched: Vec<TensorId> = Vec::new();
    for op in &g.ops {
        touched.extend(&op.inputs);
        touched.push(op.output);
    }
    for t in touched {
        let meta = g.tensor(t);
        let shape = meta.concrete_shape()?;
        if shape.len() > dominant.len() {
            let mut padded = vec![1; shape.len() - dominant.len()];
            padded.extend(&dominant);
            dominant = padded;
        }
        let offset = dominant.len() - shape.len();
        for (i, &n) in shape.iter().enumerate() {
            let d = &mut dominant[offset + i];
            if *d != n && *d != 1 && n != 1 {
                return Err(GraphError::Unify {
                    a: format!("{dominant:?}"),
                    b: format!("{shape:?} ({})", meta.name),
                });
            }
            *d = (*d).max(n);
        }
    }
    Ok(dominant)
}

/// Which tile buffers count as live.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LivenessMode {
    /// Loaded inputs and op outputs: every buffer the encoder allocates.
    #[default]
    AllBuffers,
    /// Op outputs only.
    OutputsOnly,
}

/// Peak number of simultaneously live tile buffers over the op schedule.
///
/// External inputs become live at their first use; every buffer dies after its
/// last read (or at its definition when never read). This matches the local
/// allocation the encoder performs.
pub fn peak_live_count(g: &OperatorGraph) -> usize {
    peak_live_count_with(g, LivenessMode::AllBuffers)
}

pub fn peak_live_count_with(g: &OperatorGraph, mode: LivenessMode) -> usize {
    let n = g.tensors.len();
    let mut first = vec![usize::MAX; n];
    let mut last = vec![0usize; n];
    let mut produced = vec![false; n];
    for (j, op) in g.ops.iter().enumerate() {
        for &t in &op.inputs {
            let i = t.index();
            first[i] = first[i].min(j);
            last[i] = last[i].max(j);
        }
        let o = op.output.index();
        produced[o] = true;
        first[o] = first[o].min(j);
        last[o] = last[o].max(j);
    }
    let mut peak = 0;
    for j in 0..g.ops.len() {
        let live = (0..n)
            .filter(|&i| first[i] <= j && j <= last[i])
            .filter(|&i| mode == LivenessMode::AllBuffers || produced[i])
            .count();
        peak = peak.max(live);
    }
    peak.max(1)
}
