//! Generators shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tilecode::fuser::{fuse_static, FuseOptions, FusedGroup, GroupKind};
use tilecode::graph::{
    decompose, dims, Compound, GraphBuilder, OpKind, OperatorGraph, SymDim, TensorId,
};
use tilecode::isa::{
    encode_program, Anchor, BytecodeProgram, CmpType, Extras, InstructionKind, KernelType,
    ProgramHeader, Queue, Swizzle, SyncFlag, ViewMode, ViewSpec, VirtualInstruction,
};
use tilecode::oracle::{compare, RefTensor};
use tilecode::runtime::{
    check_tolerance, compile_kernel, run_static, Allocator, RunOptions, RunReport,
};
use tilecode::tiler::DeviceConfig;
use tilecode::vm::simulate_timing;
use tilecode::Dtype;

pub const DTYPES: [Dtype; 4] = [Dtype::F16, Dtype::F32, Dtype::I32, Dtype::Bool];

fn arb_dtype() -> impl Strategy<Value = Dtype> {
    prop::sample::select(DTYPES.to_vec())
}

fn arb_queue() -> impl Strategy<Value = Queue> {
    prop::sample::select(vec![Queue::Dma, Queue::Vector, Queue::Cube, Queue::Scalar])
}

fn arb_anchor() -> impl Strategy<Value = Anchor> {
    prop_oneof![
        Just(Anchor::Row),
        Just(Anchor::Col),
        (0u32..1000).prop_map(Anchor::Fixed)
    ]
}

fn arb_view() -> impl Strategy<Value = ViewSpec> {
    (1usize..=4, arb_dtype(), any::<bool>()).prop_flat_map(|(d, dtype, grid)| {
        let dimv = |lo: u32| prop::collection::vec(lo..100_000u32, d);
        (
            dimv(0),
            dimv(1),
            dimv(1),
            prop::collection::vec(arb_anchor(), d),
            prop::sample::select(Swizzle::ALL.to_vec()),
            1u32..500,
            1u32..500,
        )
            .prop_map(
                move |(strides, sizes, extents, anchors, swizzle, rows, cols)| {
                    if grid {
                        ViewSpec {
                            dtype,
                            mode: ViewMode::Grid {
                                swizzle,
                                rows,
                                cols,
                            },
                            strides,
                            sizes,
                            extents,
                            anchors,
                        }
                    } else {
                        ViewSpec {
                            dtype,
                            mode: ViewMode::Flat,
                            strides,
                            sizes,
                            extents: Vec::new(),
                            anchors: Vec::new(),
                        }
                    }
                },
            )
    })
}

fn arb_extras(kind: InstructionKind, tile: u32) -> BoxedStrategy<Extras> {
    use InstructionKind as K;
    match kind {
        K::Load | K::Store => (tile..=tile.saturating_add(4096), arb_dtype())
            .prop_map(|(tile_stride, dtype)| Extras::Mem { tile_stride, dtype })
            .boxed(),
        K::ViewLoad | K::ViewStore => arb_view().prop_map(Extras::View).boxed(),
        K::Adds | K::Muls => (-1e6f64..1e6).prop_map(Extras::Scalar).boxed(),
        K::Cmp => prop::sample::select(CmpType::ALL.to_vec())
            .prop_map(Extras::Cmp)
            .boxed(),
        K::Cast => (arb_dtype(), arb_dtype())
            .prop_map(|(from, to)| Extras::Cast { from, to })
            .boxed(),
        K::Broadcast | K::Sum | K::ReduceMax | K::ReduceMin => (1u32..5000, 1u32..5000, 1u32..5000)
            .prop_map(|(m, size, n)| Extras::Shape3 { m, size, n })
            .boxed(),
        K::Matmul => (1u32..512, 1u32..512, 1u32..512, any::<bool>())
            .prop_map(|(m, k, n, accumulate)| Extras::Matmul {
                m,
                k,
                n,
                accumulate,
            })
            .boxed(),
        _ => Just(Extras::None).boxed(),
    }
}

/// Any well-formed instruction.
pub fn arb_instruction() -> impl Strategy<Value = VirtualInstruction> {
    prop::sample::select(InstructionKind::ALL.to_vec()).prop_flat_map(|kind| {
        if kind.is_sync() {
            return (any::<u16>(), arb_queue(), arb_queue())
                .prop_map(move |(e, from, to)| {
                    let flag = SyncFlag::new(e, from, to);
                    if kind == InstructionKind::SyncSet {
                        VirtualInstruction::sync_set(flag)
                    } else {
                        VirtualInstruction::sync_wait(flag)
                    }
                })
                .boxed();
        }
        (1u32..1 << 20, 1u32..1 << 24)
            .prop_flat_map(move |(tile, total)| {
                (
                    any::<u64>(),
                    prop::collection::vec(any::<u64>(), kind.arity()),
                    arb_extras(kind, tile),
                )
                    .prop_map(move |(dst, srcs, extras)| {
                        VirtualInstruction::new(kind, dst, srcs, tile, total, extras)
                    })
            })
            .boxed()
    })
}

/// A program of 1..=64 well-formed instructions.
pub fn arb_program() -> impl Strategy<Value = (BytecodeProgram, Vec<VirtualInstruction>)> {
    (
        prop::collection::vec(arb_instruction(), 1..=64),
        prop::sample::select(vec![
            KernelType::Vector,
            KernelType::Cube,
            KernelType::CubeVector,
            KernelType::Stacked,
        ]),
        1u32..100_000,
        1u32..=128,
    )
        .prop_map(|(body, kt, tiles, bd)| {
            let p =
                encode_program(ProgramHeader::new(kt, tiles, bd), &body).expect("valid program");
            (p, body)
        })
}

/// A random device configuration of modest size.
pub fn arb_device() -> impl Strategy<Value = DeviceConfig> {
    (1usize..=64, prop::sample::select(vec![16usize, 32, 64]))
        .prop_map(|(n, w)| DeviceConfig::new(n, 192 * 1024, w).unwrap())
}

/// A built graph, its input values and a short description.
pub struct Case {
    pub graph: OperatorGraph,
    pub inputs: HashMap<String, RefTensor<f64>>,
    pub desc: String,
}

fn inputs_for(g: &OperatorGraph, rng: &mut ChaCha8Rng) -> HashMap<String, RefTensor<f64>> {
    g.inputs()
        .into_iter()
        .map(|t| {
            let m = g.tensor(t);
            (
                m.name.clone(),
                RefTensor::random(m.dtype, m.concrete_shape().unwrap(), rng),
            )
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq)]
enum Role {
    Full,
    Row,
    Column,
}

/// Random element-wise and last-axis graph of at most eight ops over shapes
/// up to `[64, 1024]`, derived from `seed`.
pub fn random_vector_graph(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dtype = if rng.gen_bool(0.6) {
        Dtype::F32
    } else {
        Dtype::F16
    };
    let r = if rng.gen_bool(0.5) {
        rng.gen_range(1..=8)
    } else {
        rng.gen_range(1..=64)
    };
    let c = if rng.gen_bool(0.5) {
        rng.gen_range(2..=64)
    } else {
        rng.gen_range(2..=1024)
    };
    let mut b = GraphBuilder::new();
    let mut pool: Vec<(TensorId, Role)> = Vec::new();
    pool.push((b.input("x0", dtype, dims(&[r, c])).unwrap(), Role::Full));
    pool.push((b.input("x1", dtype, dims(&[r, c])).unwrap(), Role::Full));
    if rng.gen_bool(0.4) {
        pool.push((b.input("bias", dtype, dims(&[c])).unwrap(), Role::Row));
    }
    if rng.gen_bool(0.3) {
        let t = b
            .strided_input("xt", dtype, dims(&[r, c]), vec![1, r])
            .unwrap();
        pool.push((t, Role::Full));
    }
    let n_ops = rng.gen_range(1..=8);
    let mut names = Vec::new();
    let mut k = 0;
    while k < n_ops {
        let full: Vec<TensorId> = pool
            .iter()
            .filter(|p| p.1 == Role::Full)
            .map(|p| p.0)
            .collect();
        let any_of = |rng: &mut ChaCha8Rng| pool[rng.gen_range(0..pool.len())].0;
        let a = full[rng.gen_range(0..full.len())];
        let name = format!("t{k}");
        let (out, role) = match rng.gen_range(0..10) {
            0..=3 => {
                let kind = [
                    OpKind::Add,
                    OpKind::Sub,
                    OpKind::Mul,
                    OpKind::Max,
                    OpKind::Min,
                    OpKind::Div,
                ][rng.gen_range(0..6)]
                .clone();
                let other = any_of(&mut rng);
                let (x, y) = if rng.gen_bool(0.5) {
                    (a, other)
                } else {
                    (other, a)
                };
                (b.op_named(kind, &[x, y], &name).unwrap(), Role::Full)
            }
            4..=5 => {
                let kind = match rng.gen_range(0..6) {
                    0 => OpKind::Abs,
                    1 => OpKind::Sqrt,
                    2 => OpKind::Exp,
                    3 => OpKind::Adds(rng.gen_range(-2.0..2.0)),
                    4 => OpKind::Muls(rng.gen_range(-2.0..2.0)),
                    _ => OpKind::Floor,
                };
                (b.op_named(kind, &[a], &name).unwrap(), Role::Full)
            }
            6..=7 => {
                let kind = [OpKind::Sum, OpKind::ReduceMax, OpKind::ReduceMin][rng.gen_range(0..3)]
                    .clone();
                let red = b.op_named(kind, &[a], &name).unwrap();
                if rng.gen_bool(0.7) && k + 1 < n_ops {
                    k += 1;
                    let bc = b
                        .op_named(
                            OpKind::Broadcast(SymDim::Const(c)),
                            &[red],
                            &format!("t{k}"),
                        )
                        .unwrap();
                    names.push(name);
                    (bc, Role::Full)
                } else {
                    (red, Role::Column)
                }
            }
            _ => {
                let other = full[rng.gen_range(0..full.len())];
                let cmp = CmpType::ALL[rng.gen_range(0..CmpType::ALL.len())];
                let mask = b.op_named(OpKind::Cmp(cmp), &[a, other], &name).unwrap();
                if k + 1 < n_ops {
                    k += 1;
                    let sel = b
                        .op_named(OpKind::Select, &[mask, a, other], &format!("t{k}"))
                        .unwrap();
                    names.push(name);
                    (sel, Role::Full)
                } else {
                    (mask, Role::Full)
                }
            }
        };
        names.push(b.meta(out).name.clone());
        if role != Role::Column {
            pool.push((out, role));
        }
        k += 1;
    }
    let last = b.find(names.last().unwrap()).unwrap();
    b.output(last);
    if names.len() > 2 && rng.gen_bool(0.5) {
        let extra = b.find(&names[rng.gen_range(0..names.len() - 1)]).unwrap();
        b.output(extra);
    }
    let g = b.build();
    let inputs = inputs_for(&g, &mut rng);
    let kinds: Vec<&str> = g.ops.iter().map(|o| o.kind.name()).collect();
    let desc = format!("seed={seed} {dtype} [{r},{c}] ops={}", kinds.join(","));
    Case {
        graph: g,
        inputs,
        desc,
    }
}

/// Random matmul, addmm or layernorm instance derived from `seed`.
pub fn random_cube_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new();
    let which = seed % 3;
    let desc;
    match which {
        0 | 1 => {
            let (m, k, n) = (
                rng.gen_range(1..=96),
                rng.gen_range(1..=96),
                rng.gen_range(1..=96),
            );
            let x = b.input("x", Dtype::F32, dims(&[m, k])).unwrap();
            let w = b.input("w", Dtype::F32, dims(&[k, n])).unwrap();
            let y = if which == 0 {
                desc = format!("seed={seed} matmul {m}x{k}x{n}");
                b.op_named(OpKind::Matmul, &[x, w], "y").unwrap()
            } else {
                desc = format!("seed={seed} addmm {m}x{k}x{n}");
                let bias = b.input("bias", Dtype::F32, dims(&[n])).unwrap();
                decompose(&mut b, Compound::Addmm, &[x, w, bias], "y").unwrap()
            };
            b.output(y);
        }
        _ => {
            let dtype = if rng.gen_bool(0.5) {
                Dtype::F32
            } else {
                Dtype::F16
            };
            let (r, c) = (rng.gen_range(1..=32), rng.gen_range(2..=512));
            desc = format!("seed={seed} layernorm {dtype} [{r},{c}]");
            let x = b.input("x", dtype, dims(&[r, c])).unwrap();
            let y = decompose(&mut b, Compound::LayerNorm { eps: 1e-5 }, &[x], "y").unwrap();
            b.output(y);
        }
    }
    let g = b.build();
    let inputs = inputs_for(&g, &mut rng);
    Case {
        graph: g,
        inputs,
        desc,
    }
}

/// Fused and per-op global bytes moved by one group of the concrete graph `g`.
pub fn group_traffic(g: &OperatorGraph, group: &FusedGroup, cfg: &DeviceConfig) -> (u64, u64) {
    let bytes = |grp: &FusedGroup| {
        let k = compile_kernel(g, grp, &mut Allocator::default(), cfg).expect("group compiles");
        simulate_timing(&k.compiled.program, cfg)
            .expect("program decodes")
            .global_bytes
    };
    let single: u64 = group
        .ops
        .iter()
        .map(|&i| {
            bytes(&FusedGroup {
                kind: GroupKind::Singleton,
                ops: vec![i],
                outputs: vec![g.ops[i].output],
            })
        })
        .sum();
    (bytes(group), single)
}

/// Static fusion of `g` as the runtime performs it.
pub fn static_fusion(g: &OperatorGraph, cfg: &DeviceConfig) -> Vec<FusedGroup> {
    let mut symbolic = g.clone();
    symbolic.symbols.clear_bindings();
    fuse_static(
        &symbolic,
        &FuseOptions {
            device: Some(cfg.clone()),
            ..FuseOptions::default()
        },
    )
}

pub fn run_case(case: &Case, cfg: &DeviceConfig, fuse: bool) -> RunReport {
    let opts = RunOptions {
        check: true,
        fuse,
        stack: fuse,
        ..RunOptions::default()
    };
    run_static(&case.graph, &case.inputs, cfg, &opts)
        .unwrap_or_else(|e| panic!("{}: {e}", case.desc))
}

/// Outputs of two runs agree within the oracle tolerances of `g`.
pub fn same_outputs(g: &OperatorGraph, a: &RunReport, b: &RunReport) -> bool {
    a.values.len() == b.values.len()
        && a.values.iter().all(|(name, x)| {
            let Some(y) = b.values.get(name) else {
                return false;
            };
            let tol = check_tolerance(g, g.find(name).unwrap(), y);
            compare(x, y, tol).is_ok_and(|r| r.pass)
        })
}
