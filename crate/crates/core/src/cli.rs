//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::Error;
use crate::format::{looks_like_trace, parse_trace, GraphFile, TraceEvent};
use crate::fuser::{fuse_static, group_dependencies, plan_stacking, FuseOptions, FusedGroup};
use crate::isa::disassemble;
use crate::runtime::{
    compile_kernel, run_graph, run_stream, trace_to_graph, Allocator, Mode, RunOptions, RunReport,
};
use crate::tiler::{tile_group, tiling_cost_with, DeviceConfig};

pub const EXIT_CHECK: i32 = 1;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_TILING: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "tilecode",
    version,
    about = "Tile-level bytecode compiler and simulated SPMD device"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fuse, compile and execute a graph or trace.
    Run(Common),
    /// Print the tiling of every fused group.
    Tile(Common),
    /// Print the fused groups and the stacking plan.
    Fuse(Common),
    /// Print the bytecode of every fused group.
    Disasm(Common),
    /// Compare the fused, stacked plan against one kernel per operator.
    Bench(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Graph file (JSON) or trace file (JSON lines).
    path: PathBuf,
    #[arg(long, default_value_t = 40)]
    cores: usize,
    #[arg(long = "local-mem", default_value_t = 196_608)]
    local_mem: usize,
    /// Hardware instruction width in bytes.
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Static)]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Compare results against the reference executor.
    #[arg(long)]
    check: bool,
    /// Run device cores one after another.
    #[arg(long)]
    sequential: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Static,
    Stream,
}

enum Input {
    Graph(GraphFile),
    Trace(Vec<TraceEvent>),
}

impl Input {
    fn load(path: &Path) -> Result<Input, Error> {
        let text = std::fs::read_to_string(path)?;
        let trace = path.extension().is_some_and(|e| e == "jsonl") || looks_like_trace(&text);
        Ok(if trace {
            Input::Trace(parse_trace(&text)?)
        } else {
            Input::Graph(GraphFile::parse(&text)?)
        })
    }

    fn graph(&self) -> GraphFile {
        match self {
            Input::Graph(g) => g.clone(),
            Input::Trace(t) => trace_to_graph(t),
        }
    }

    fn run(&self, cfg: &DeviceConfig, opts: &RunOptions) -> Result<RunReport, Error> {
        match (self, opts.mode) {
            (Input::Trace(t), Mode::Stream) => run_stream(t, cfg, opts),
            _ => run_graph(&self.graph(), cfg, opts),
        }
    }
}

impl Common {
    fn config(&self) -> Result<DeviceConfig, Error> {
        Ok(DeviceConfig::new(self.cores, self.local_mem, self.width)?)
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            mode: match self.mode {
                ModeArg::Static => Mode::Static,
                ModeArg::Stream => Mode::Stream,
            },
            seed: self.seed,
            check: self.check,
            parallel: !self.sequential,
            ..RunOptions::default()
        }
    }
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_tiling() {
        return EXIT_TILING;
    }
    match e {
        Error::Parse(_) | Error::Io(_) | Error::Graph(_) | Error::Decode(_) => EXIT_PARSE,
        _ => EXIT_CHECK,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// its exit status.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_PARSE } else { 0 };
            let _ = if code == 0 {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    let result = match &cli.command {
        Command::Run(c) => cmd_run(c, out),
        Command::Tile(c) => cmd_tile(c, out),
        Command::Fuse(c) => cmd_fuse(c, out),
        Command::Disasm(c) => cmd_disasm(c, out),
        Command::Bench(c) => cmd_bench(c, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn cmd_run(c: &Common, out: &mut dyn Write) -> Result<i32, Error> {
    let input = Input::load(&c.path)?;
    let report = input.run(&c.config()?, &c.options())?;
    out.write_all(report.render().as_bytes())?;
    Ok(match &report.check {
        Some(check) if !check.pass => EXIT_CHECK,
        _ => 0,
    })
}

/// Static fusion of the input, with the concrete graph it applies to.
fn static_groups(
    input: &Input,
    cfg: &DeviceConfig,
    seed: u64,
) -> Result<(crate::graph::OperatorGraph, Vec<FusedGroup>), Error> {
    let (g, _) = input.graph().build(seed)?;
    let mut symbolic = g.clone();
    symbolic.symbols.clear_bindings();
    let groups = fuse_static(
        &symbolic,
        &FuseOptions {
            device: Some(cfg.clone()),
            ..FuseOptions::default()
        },
    );
    Ok((g.concretize()?, groups))
}

fn cmd_tile(c: &Common, out: &mut dyn Write) -> Result<i32, Error> {
    let input = Input::load(&c.path)?;
    let cfg = c.config()?;
    let (g, groups) = static_groups(&input, &cfg, c.seed)?;
    for (i, grp) in groups.iter().enumerate() {
        let tg = tile_group(&grp.subgraph(&g), &cfg)?;
        write!(
            out,
            "group {i}: {} tile={} tiles={} tail={} t_max={}",
            grp.label(&g),
            tg.tile_elems,
            tg.tiles,
            tg.tail,
            tg.t_max
        )?;
        match tg.matmul() {
            Some(mm) => writeln!(
                out,
                " m={} k={} n={} tm={} tn={} tk={} grid={}x{} swizzle={:?}",
                mm.m, mm.k, mm.n, mm.tm, mm.tn, mm.tk, mm.grid_rows, mm.grid_cols, mm.swizzle
            )?,
            None => {
                let w = cfg.width_elems(tg.elem_bytes);
                let cost = |t: usize| {
                    tiling_cost_with(t, tg.total_elems, cfg.num_cores, cfg.tile_overhead)
                };
                writeln!(
                    out,
                    " total={} pre_round={} pre_round_cost={} cost={}",
                    tg.total_elems, tg.best_size, tg.best_cost, tg.cost
                )?;
                let lo = tg.tile_elems.saturating_sub(w);
                if lo > 0 {
                    writeln!(out, "  neighbor tile={lo} cost={}", cost(lo))?;
                }
                let hi = tg.tile_elems + w;
                writeln!(out, "  neighbor tile={hi} cost={}", cost(hi))?;
            }
        }
    }
    Ok(0)
}

fn names(g: &crate::graph::OperatorGraph, ts: &[crate::graph::TensorId]) -> String {
    let v: Vec<&str> = ts.iter().map(|&t| g.tensor(t).name.as_str()).collect();
    v.join(",")
}

fn cmd_fuse(c: &Common, out: &mut dyn Write) -> Result<i32, Error> {
    let input = Input::load(&c.path)?;
    let cfg = c.config()?;
    if c.options().mode == Mode::Stream {
        let report = input.run(&cfg, &c.options())?;
        for (i, grp) in report.groups.iter().enumerate() {
            writeln!(
                out,
                "group {i}: {} flushed_by={}",
                grp.label,
                grp.flushed_by.unwrap_or("-")
            )?;
        }
        return Ok(0);
    }
    let (g, groups) = static_groups(&input, &cfg, c.seed)?;
    for (i, grp) in groups.iter().enumerate() {
        writeln!(
            out,
            "group {i}: {} in=[{}] out=[{}]",
            grp.label(&g),
            names(&g, &grp.inputs(&g)),
            names(&g, &grp.outputs)
        )?;
    }
    let mut tiles = Vec::with_capacity(groups.len());
    for grp in &groups {
        tiles.push(tile_group(&grp.subgraph(&g), &cfg)?.tiles);
    }
    let plan = plan_stacking(&tiles, &group_dependencies(&g, &groups), cfg.num_cores);
    for l in plan.describe() {
        writeln!(out, "launch {l}")?;
    }
    Ok(0)
}

fn cmd_disasm(c: &Common, out: &mut dyn Write) -> Result<i32, Error> {
    let input = Input::load(&c.path)?;
    let cfg = c.config()?;
    let (g, groups) = static_groups(&input, &cfg, c.seed)?;
    let mut alloc = Allocator::default();
    for (i, grp) in groups.iter().enumerate() {
        let k = compile_kernel(&g, grp, &mut alloc, &cfg)?;
        writeln!(out, "; group {i}: {}", k.label)?;
        out.write_all(disassemble(&k.compiled.program)?.as_bytes())?;
    }
    Ok(0)
}

fn median(mut v: Vec<Duration>) -> Duration {
    if v.is_empty() {
        return Duration::ZERO;
    }
    v.sort();
    v[v.len() / 2]
}

fn cmd_bench(c: &Common, out: &mut dyn Write) -> Result<i32, Error> {
    let input = Input::load(&c.path)?;
    let cfg = c.config()?;
    let base = c.options();
    let plans = [
        ("fused", base.clone()),
        (
            "unfused",
            RunOptions {
                fuse: false,
                stack: false,
                ..base.clone()
            },
        ),
    ];
    writeln!(
        out,
        "{:<8} {:>7} {:>8} {:>14} {:>14} {:>12} {:>13} {:>12}",
        "plan",
        "kernels",
        "launches",
        "makespan",
        "total_time",
        "global_bytes",
        "decode_hidden",
        "compile_us"
    )?;
    let mut lines = Vec::new();
    let mut failed = false;
    for (name, opts) in plans {
        let r = input.run(&cfg, &opts)?;
        let s = &r.stats;
        let compile_us = median(r.compile_times.clone()).as_secs_f64() * 1e6;
        writeln!(
            out,
            "{:<8} {:>7} {:>8} {:>14.1} {:>14.1} {:>12} {:>13} {:>12.1}",
            name,
            r.groups.len(),
            s.launches,
            s.makespan,
            s.total_time(&cfg.timing),
            s.global_bytes,
            s.decode_hidden,
            compile_us
        )?;
        lines.push(format!(
            "bench plan={name} kernels={} launches={} makespan={:.3} zero_decode_makespan={:.3} total_time={:.3} global_bytes={} decode_hidden={}",
            r.groups.len(),
            s.launches,
            s.makespan,
            s.zero_decode_makespan,
            s.total_time(&cfg.timing),
            s.global_bytes,
            s.decode_hidden
        ));
        if let Some(check) = &r.check {
            lines.push(format!(
                "check plan={name} {} max_abs_error={:.3e}",
                if check.pass { "PASS" } else { "FAIL" },
                check.max_abs_error
            ));
            failed |= !check.pass;
        }
    }
    for l in lines {
        writeln!(out, "{l}")?;
    }
    Ok(if failed { EXIT_CHECK } else { 0 })
}
