use crate::error::GraphError;

use super::{GraphBuilder, OpKind, SymDim, TensorId};

/// Compound operators that lower to basic ops.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Compound {
    /// `a @ b + c`.
    Addmm,
    /// Normalization over the last axis (no affine parameters).
    LayerNorm { eps: f64 },
    /// `(cond ? 2x : 4x) + y` with the branch already resolved on the host.
    IfElseAdd { taken: bool },
}

impl Compound {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn parse(
        name: &str,
        eps: Option<f64>,
        taken: Option<bool>,
    ) -> Result<Compound, GraphError> {
        match name {
            "addmm" => Ok(Compound::Addmm),
            "layernorm" | "layer_norm" => Ok(Compound::LayerNorm {
                eps: eps.unwrap_or(Self::DEFAULT_EPS),
            }),
            "if_else_add" => Ok(Compound::IfElseAdd {
                taken: taken.ok_or_else(|| {
                    GraphError::Invalid("if_else_add needs a resolved `taken` branch".into())
                })?,
            }),
            other => Err(GraphError::UnknownCompound(other.to_string())),
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Compound::Addmm => 3,
            Compound::LayerNorm { .. } => 1,
            Compound::IfElseAdd { .. } => 2,
        }
    }
}

/// Appends the basic ops of `compound` to `b`; the final op writes `out`.
pub fn decompose(
    b: &mut GraphBuilder,
    compound: Compound,
    args: &[TensorId],
    out: &str,
) -> Result<TensorId, GraphError> {
    if args.len() != compound.arity() {
        return Err(GraphError::BadOp {
            op: out.to_string(),
            reason: format!("{compound:?} takes {} tensors", compound.arity()),
        });
    }
    let tmp = |i: usize| format!("{out}.{i}");
    match compound {
        Compound::Addmm => {
            let prod = b.op_named(OpKind::Matmul, &[args[0], args[1]], &tmp(0))?;
            b.op_named(OpKind::Add, &[prod, args[2]], out)
        }
        Compound::IfElseAdd { taken } => {
            let factor = if taken { 2.0 } else { 4.0 };
            let scaled = b.op_named(OpKind::Muls(factor), &[args[0]], &tmp(0))?;
            b.op_named(OpKind::Add, &[scaled, args[1]], out)
        }
        Compound::LayerNorm { eps } => {
            let x = args[0];
            let last: SymDim = b
                .meta(x)
                .shape
                .last()
                .cloned()
                .ok_or_else(|| GraphError::Invalid("layernorm of a rank-0 tensor".into()))?;
            let h = match &last {
                SymDim::Const(n) => *n,
                SymDim::Sym(s) => b
                    .symbols()
                    .value(s)
                    .ok_or_else(|| GraphError::Unbound(s.clone()))?,
            };
            let inv = 1.0 / h as f64;
            let sum = b.op_named(OpKind::Sum, &[x], &tmp(0))?;
            let mean = b.op_named(OpKind::Muls(inv), &[sum], &tmp(1))?;
            let mean_b = b.op_named(OpKind::Broadcast(last.clone()), &[mean], &tmp(2))?;
            let centered = b.op_named(OpKind::Sub, &[x, mean_b], &tmp(3))?;
            let sq = b.op_named(OpKind::Mul, &[centered, centered], &tmp(4))?;
            let sq_sum = b.op_named(OpKind::Sum, &[sq], &tmp(5))?;
            let var = b.op_named(OpKind::Muls(inv), &[sq_sum], &tmp(6))?;
            let var_eps = b.op_named(OpKind::Adds(eps), &[var], &tmp(7))?;
            let std = b.op_named(OpKind::Sqrt, &[var_eps], &tmp(8))?;
            let std_b = b.op_named(OpKind::Broadcast(last), &[std], &tmp(9))?;
            b.op_named(OpKind::Div, &[centered, std_b], out)
        }
    }
}
