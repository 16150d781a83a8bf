//! Acceptance runner: one PASS/FAIL line per criterion.

mod common;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::{Config, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{
    arb_instruction, arb_program, group_traffic, random_cube_case, random_vector_graph, run_case,
    same_outputs, static_fusion,
};
use tilecode::format::parse_trace;
use tilecode::fuser::GroupKind;
use tilecode::graph::{dims, GraphBuilder, OpKind};
use tilecode::isa::{
    decode_instruction, decode_program, encode_instruction, encode_program, Extras,
    InstructionKind, KernelType, ProgramHeader, Queue, SyncFlag, VirtualInstruction,
};
use tilecode::runtime::{
    compile_kernel, graph_to_trace, run_graph, run_stream, trace_to_graph, with_block_dim,
};
use tilecode::runtime::{Allocator, Mode, RunOptions};
use tilecode::tiler::{align_search, hardware_align_div, tile_group, DeviceConfig, TimingParams};
use tilecode::vm::{simulate_timing, tile_range};
use tilecode::Dtype;

const GOLDEN_TIME_LIMIT: Duration = Duration::from_secs(1);
const ALIGN_INSTANCES: usize = 1000;
const FUZZ_INSTRUCTIONS: usize = 10_000;
const FUZZ_PROGRAMS: usize = 1000;
const VECTOR_GRAPHS: u64 = 500;
const CUBE_CASES: u64 = 100;
const TIMING_CONFIGS: u64 = 200;
const COMPILE_BUDGET: Duration = Duration::from_millis(1);
const COMPILE_SAMPLES: usize = 101;
/// Relative slack on floating-point makespan comparisons.
const MAKESPAN_SLACK: f64 = 1e-9;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// `" first failure: ..."` when there is one.
fn first<T: std::fmt::Debug>(x: Option<T>) -> String {
    x.map(|v| format!("; first failure: {v:?}"))
        .unwrap_or_default()
}

fn data(name: &str) -> String {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name);
    std::fs::read_to_string(p).expect("example file")
}

fn golden_tiling() -> Outcome {
    let start = Instant::now();
    let mut b = GraphBuilder::new();
    let x = b.input("x", Dtype::F16, dims(&[32, 1024])).unwrap();
    let y = b.input("y", Dtype::F16, dims(&[32, 1024])).unwrap();
    let z = b.op_named(OpKind::Add, &[x, y], "z").unwrap();
    b.output(z);
    let tg = tile_group(&b.build(), &DeviceConfig::default()).unwrap();
    let elapsed = start.elapsed();
    let got = (tg.best_size, tg.best_cost, tg.tile_elems, tg.tiles, tg.tail);
    outcome(
        got == (820, 822, 832, 40, 320) && elapsed < GOLDEN_TIME_LIMIT,
        format!(
            "pre_round={} cost={} tile={} tiles={} tail={} in {:.3} ms",
            got.0,
            got.1,
            got.2,
            got.3,
            got.4,
            elapsed.as_secs_f64() * 1e3
        ),
    )
}

/// Exhaustive minimizer of `ceil(ceil(total/t)/n) * (t + 2)` over `1..=t_max`.
fn brute_force(t_max: usize, total: usize, n: usize) -> (usize, u64) {
    let mut best = (0, u64::MAX);
    for t in 1..=t_max {
        let c = (total.div_ceil(t) as u64).div_ceil(n as u64) * (t as u64 + 2);
        if c < best.1 {
            best = (t, c);
        }
    }
    best
}

fn cost_model_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa11c);
    let mut agree = 0;
    let mut first_bad = None;
    for _ in 0..ALIGN_INSTANCES {
        let total = rng.gen_range(1..=100_000usize);
        let n = rng.gen_range(1..=64usize);
        let width = [16usize, 32, 64][rng.gen_range(0..3)];
        let dtype_bytes = [2usize, 4][rng.gen_range(0..2)];
        let t_max = rng.gen_range(1..=total);
        let cfg = DeviceConfig::new(n, 192 * 1024, width).unwrap();
        let (t_star, cost) = brute_force(t_max, total, n);
        let w = cfg.width_elems(dtype_bytes);
        let choice = align_search(t_max, 1, total, &cfg, dtype_bytes);
        let ok = choice.best_multiplier == t_star
            && choice.best_cost == cost
            && hardware_align_div(t_max, 1, total, &cfg, dtype_bytes)
                == (t_star.div_ceil(w) * w).min(t_max);
        if ok {
            agree += 1;
        } else {
            first_bad.get_or_insert((total, n, width, t_max));
        }
    }
    outcome(
        agree == ALIGN_INSTANCES,
        format!(
            "{agree}/{ALIGN_INSTANCES} instances agree{}",
            first(first_bad)
        ),
    )
}

fn bytecode_roundtrip() -> Outcome {
    let mut runner = TestRunner::new_with_rng(
        Config::default(),
        TestRng::deterministic_rng(Config::default().rng_algorithm),
    );
    let insn = arb_instruction();
    let mut insn_ok = 0;
    for _ in 0..FUZZ_INSTRUCTIONS {
        let i = insn.new_tree(&mut runner).unwrap().current();
        let ok = encode_instruction(&i)
            .ok()
            .and_then(|bytes| {
                decode_instruction(&bytes, 0)
                    .ok()
                    .map(|(d, len)| d == i && len == bytes.len())
            })
            .unwrap_or(false);
        insn_ok += ok as usize;
    }
    let prog = arb_program();
    let mut prog_ok = 0;
    for _ in 0..FUZZ_PROGRAMS {
        let (p, body) = prog.new_tree(&mut runner).unwrap().current();
        let mut walk = p.walk();
        let walked = walk.by_ref().filter(|r| r.is_ok()).count();
        let ok = decode_program(&p).is_ok_and(|d| d == body)
            && walked == body.len()
            && walk.offset() == p.header.code_size as usize;
        prog_ok += ok as usize;
    }
    outcome(
        insn_ok == FUZZ_INSTRUCTIONS && prog_ok == FUZZ_PROGRAMS,
        format!("{insn_ok}/{FUZZ_INSTRUCTIONS} instructions, {prog_ok}/{FUZZ_PROGRAMS} programs"),
    )
}

fn functional_equivalence() -> Outcome {
    let cfg = DeviceConfig::default();
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for seed in 0..VECTOR_GRAPHS {
        let case = random_vector_graph(seed);
        let r = run_case(&case, &cfg, true);
        let check = r.check.unwrap();
        worst = worst.max(check.max_abs_error);
        if !check.pass {
            failures.push(case.desc);
        }
    }
    for seed in 0..CUBE_CASES {
        let case = random_cube_case(seed);
        let r = run_case(&case, &cfg, true);
        let check = r.check.unwrap();
        worst = worst.max(check.max_abs_error);
        if !check.pass {
            failures.push(case.desc);
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{} vector graphs + {} cube cases, {} failures, max abs error {worst:.3e}{}",
            VECTOR_GRAPHS,
            CUBE_CASES,
            failures.len(),
            first(failures.first())
        ),
    )
}

fn fusion_preservation() -> Outcome {
    let cfg = DeviceConfig::default();
    let mut mismatched = Vec::new();
    let mut groups = 0;
    let mut worse = Vec::new();
    for seed in 0..VECTOR_GRAPHS {
        let case = random_vector_graph(seed);
        let fused = run_case(&case, &cfg, true);
        let single = run_case(&case, &cfg, false);
        if !same_outputs(&case.graph, &fused, &single) {
            mismatched.push(case.desc.clone());
        }
        let g = case.graph.concretize().unwrap();
        for grp in static_fusion(&case.graph, &cfg) {
            if grp.kind == GroupKind::VvPattern && grp.ops.len() >= 2 {
                groups += 1;
                let (f, s) = group_traffic(&g, &grp, &cfg);
                if f >= s {
                    worse.push(format!("{} {} {f}>={s}", case.desc, grp.label(&g)));
                }
            }
        }
    }
    outcome(
        mismatched.is_empty() && worse.is_empty() && groups > 0,
        format!(
            "{} output mismatches; {} of {groups} multi-op vv groups without traffic reduction{}",
            mismatched.len(),
            worse.len(),
            first(mismatched.first().or(worse.first()))
        ),
    )
}

fn streaming_golden() -> Outcome {
    let cfg = DeviceConfig::default();
    let opts = RunOptions {
        mode: Mode::Stream,
        check: true,
        ..RunOptions::default()
    };
    let trace = parse_trace(&data("add_sqrt.jsonl")).unwrap();
    let r = run_stream(&trace, &cfg, &opts).unwrap();
    let compute: Vec<&str> = r
        .groups
        .iter()
        .flat_map(|g| g.instructions.iter().map(String::as_str))
        .filter(|m| !m.starts_with("Sync"))
        .collect();
    let golden = r.groups.len() == 1
        && r.groups[0].flushed_by == Some("host_read")
        && compute == ["Load", "Load", "Add", "Sqrt", "Store"]
        && r.check.as_ref().is_some_and(|c| c.pass);

    let siblings = parse_trace(&data("sibling_adds.jsonl")).unwrap();
    let stream = run_stream(&siblings, &cfg, &opts).unwrap();
    let stat = run_graph(
        &trace_to_graph(&siblings),
        &cfg,
        &RunOptions {
            check: true,
            ..RunOptions::default()
        },
    )
    .unwrap();
    let symbolic = stream.groups.len() == 1
        && stat.groups.len() == 2
        && stream.check.as_ref().is_some_and(|c| c.pass)
        && stat.check.as_ref().is_some_and(|c| c.pass);
    // The static graph file replays through the stream path unchanged.
    let replay = run_stream(&graph_to_trace(&trace_to_graph(&siblings)), &cfg, &opts).unwrap();
    outcome(
        golden && symbolic && replay.groups.len() == 1,
        format!(
            "add/sqrt: {} group(s) {compute:?} flushed_by={:?}; runtime b=c: stream {} group(s), static {}",
            r.groups.len(),
            r.groups.first().and_then(|g| g.flushed_by),
            stream.groups.len(),
            stat.groups.len()
        ),
    )
}

fn random_timing(rng: &mut ChaCha8Rng) -> TimingParams {
    TimingParams {
        decode: 0.0,
        dma_per_byte: rng.gen_range(0.05..2.0),
        vector_per_elem: rng.gen_range(0.05..2.0),
        cube_per_mac: rng.gen_range(0.001..0.5),
        sync: rng.gen_range(0.0..8.0),
        launch: 50.0,
    }
}

fn decode_hiding() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xdec0de);
    let mut hidden = 0;
    let mut programs = 0;
    let mut first_bad = None;
    for seed in 0..TIMING_CONFIGS {
        let case = if seed % 4 == 3 {
            random_cube_case(seed)
        } else {
            random_vector_graph(seed)
        };
        let cores = rng.gen_range(1..=40);
        let base = DeviceConfig {
            num_cores: cores,
            timing: random_timing(&mut rng),
            ..DeviceConfig::default()
        };
        let g = case.graph.concretize().unwrap();
        let mut alloc = Allocator::default();
        for grp in static_fusion(&case.graph, &base) {
            let k = compile_kernel(&g, &grp, &mut alloc, &base).unwrap();
            let p = with_block_dim(&k.compiled.program, cores);
            // Per-tile busy time of the bottleneck unit, the cheapest over cores.
            let unit = simulate_timing(&p, &base)
                .unwrap()
                .cores
                .iter()
                .filter(|c| c.tiles > 0)
                .map(|c| c.busy.dma.max(c.busy.vector).max(c.busy.cube) / c.tiles as f64)
                .fold(f64::INFINITY, f64::min);
            let decode = rng.gen_range(0.0..=1.0) * unit / k.compiled.body.len() as f64;
            let cfg = DeviceConfig {
                timing: TimingParams {
                    decode,
                    ..base.timing
                },
                ..base.clone()
            };
            let s = simulate_timing(&p, &cfg).unwrap();
            let burst = k.compiled.body.len() as f64 * decode;
            let ok = s.makespan + MAKESPAN_SLACK * s.makespan.max(1.0) >= s.zero_decode_makespan
                && s.makespan
                    <= s.zero_decode_makespan + burst + MAKESPAN_SLACK * s.makespan.max(1.0);
            programs += 1;
            if ok {
                hidden += 1;
            } else {
                first_bad.get_or_insert(format!("{} {}", case.desc, grp.label(&g)));
            }
        }
    }
    // Single-kernel pipeline: three zero-cost syncs and one vector op of e elements per tile.
    let mut identity = true;
    for _ in 0..TIMING_CONFIGS {
        let d = rng.gen_range(0.0..4.0);
        let k = rng.gen_range(1..=64u32);
        let e = (4.0f64 * d + rng.gen_range(0.0..50.0)).ceil().max(1.0);
        let f0 = SyncFlag::new(0, Queue::Dma, Queue::Vector);
        let f1 = SyncFlag::new(1, Queue::Dma, Queue::Vector);
        let n = e as u32;
        let body = vec![
            VirtualInstruction::sync_set(f0),
            VirtualInstruction::sync_wait(f0),
            VirtualInstruction::sync_set(f1),
            VirtualInstruction::new(InstructionKind::Sqrt, 0, vec![0], n, n * k, Extras::None),
        ];
        let p = encode_program(ProgramHeader::new(KernelType::Vector, k, 1), &body).unwrap();
        let cfg = DeviceConfig {
            num_cores: 1,
            timing: TimingParams {
                decode: d,
                vector_per_elem: 1.0,
                sync: 0.0,
                ..TimingParams::default()
            },
            ..DeviceConfig::default()
        };
        let s = simulate_timing(&p, &cfg).unwrap();
        let expected = 4.0 * d + k as f64 * e;
        identity &= (s.makespan - expected).abs() <= MAKESPAN_SLACK * expected.max(1.0);
    }
    outcome(
        hidden == programs && identity,
        format!(
            "{hidden}/{programs} kernels over {TIMING_CONFIGS} configs within one decode burst; pipeline identity {}{}",
            if identity { "holds" } else { "violated" },
            first(first_bad)
        ),
    )
}

fn compile_latency() -> Outcome {
    let cfg = DeviceConfig::default();
    let mut b = GraphBuilder::new();
    let x = b.input("x", Dtype::F32, dims(&[64, 1024])).unwrap();
    let y = b.input("y", Dtype::F32, dims(&[64, 1024])).unwrap();
    let mut t = b.op(OpKind::Add, &[x, y]).unwrap();
    for kind in [
        OpKind::Mul,
        OpKind::Abs,
        OpKind::Adds(1.0),
        OpKind::Sqrt,
        OpKind::Max,
        OpKind::Muls(0.5),
        OpKind::Sub,
        OpKind::Exp,
        OpKind::Min,
    ] {
        t = if kind.arity() == 2 {
            b.op(kind, &[t, y]).unwrap()
        } else {
            b.op(kind, &[t]).unwrap()
        };
    }
    b.output(t);
    let g = b.build();
    let groups = static_fusion(&g, &cfg);
    if groups.len() != 1 || groups[0].ops.len() != 10 {
        return outcome(
            false,
            format!("expected one 10-op group, got {}", groups.len()),
        );
    }
    let mut times: Vec<Duration> = (0..COMPILE_SAMPLES)
        .map(|_| {
            compile_kernel(&g, &groups[0], &mut Allocator::default(), &cfg)
                .unwrap()
                .compile_time
        })
        .collect();
    times.sort();
    let median = times[times.len() / 2];
    outcome(
        median < COMPILE_BUDGET,
        format!(
            "median tile+encode {:.1} us over {COMPILE_SAMPLES} runs",
            median.as_secs_f64() * 1e6
        ),
    )
}

fn tile_assignment() -> Outcome {
    let mut bad = None;
    'outer: for m in 1..=10_000u32 {
        for n in 1..=128u32 {
            let mut next = 0u64;
            for id in 0..n {
                let r = tile_range(id, m, n);
                if r.start != next.min(m as u64) || r.end < r.start {
                    bad = Some((m, n, id));
                    break 'outer;
                }
                next = next.max(r.end);
            }
            if next != m as u64 {
                bad = Some((m, n, n));
                break 'outer;
            }
        }
    }
    outcome(
        bad.is_none(),
        match bad {
            None => "all M <= 10000, N <= 128 partition [0, M)".to_string(),
            Some(b) => format!("gap or overlap at (M, N, core) = {b:?}"),
        },
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("golden tiling", golden_tiling),
        ("cost-model oracle", cost_model_oracle),
        ("bytecode roundtrip", bytecode_roundtrip),
        ("functional equivalence", functional_equivalence),
        ("fusion preservation and traffic", fusion_preservation),
        ("streaming golden case", streaming_golden),
        ("decode hiding", decode_hiding),
        ("compile latency", compile_latency),
        ("tile assignment", tile_assignment),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = run();
        failed += !o.pass as usize;
        println!(
            "{} criterion {}: {name}: {} ({:.2} s)",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
