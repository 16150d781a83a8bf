use std::path::PathBuf;
use std::process::{Command, Output};

fn data(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn tilecode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tilecode"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn tile_prints_golden_line() {
    let o = tilecode(&["tile", &data("add_f16.json")]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with(
        "group 0: singleton{add} tile=832 tiles=40 tail=320 t_max=32768 total=32768 pre_round=820 pre_round_cost=822"
    ));
    assert!(text.contains("neighbor tile=816"));
}

#[test]
fn fuse_labels_cube_vector_group() {
    let o = tilecode(&["fuse", &data("addmm.json")]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("group 0: cv-pattern{matmul,add} in=[x,w,bias] out=[y]"));
}

#[test]
fn stream_fuse_reports_flush_reason() {
    let o = tilecode(&["fuse", &data("add_sqrt.jsonl"), "--mode", "stream"]);
    assert_eq!(
        stdout(&o),
        "group 0: vv-pattern{add,sqrt} flushed_by=host_read\n"
    );
}

#[test]
fn disasm_lists_synchronized_body() {
    let o = tilecode(&["disasm", &data("sqrt_1op.json")]);
    let text = stdout(&o);
    let ops: Vec<&str> = text
        .lines()
        .skip(2)
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    assert_eq!(
        ops,
        ["Load", "SyncSet", "SyncWait", "Sqrt", "SyncSet", "SyncWait", "Store"]
    );
}

#[test]
fn run_with_check_passes_on_examples() {
    for (file, mode) in [
        ("add_f16.json", "static"),
        ("addmm.json", "static"),
        ("layernorm.json", "static"),
        ("add_sqrt.jsonl", "stream"),
        ("branch_taken.jsonl", "stream"),
        ("branch_not_taken.jsonl", "stream"),
        ("sibling_adds.jsonl", "stream"),
    ] {
        let o = tilecode(&["run", &data(file), "--mode", mode, "--check"]);
        assert!(
            o.status.success(),
            "{file}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

#[test]
fn bench_reports_both_plans() {
    let o = tilecode(&["bench", &data("layernorm.json"), "--check"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("bench plan=fused kernels=1"));
    assert!(text.contains("bench plan=unfused kernels=11"));
    assert!(text.contains("check plan=fused PASS"));
}

#[test]
fn exit_codes() {
    assert_eq!(
        tilecode(&["run", "/nonexistent/graph.json"]).status.code(),
        Some(2)
    );
    assert_eq!(
        tilecode(&["run", &data("add_f16.json"), "--local-mem", "4"])
            .status
            .code(),
        Some(3)
    );
    assert_eq!(
        tilecode(&["tile", &data("addmm.json"), "--local-mem", "1024"])
            .status
            .code(),
        Some(3)
    );
    assert_eq!(tilecode(&["frobnicate"]).status.code(), Some(2));
    let bad = tempfile::NamedTempFile::new().unwrap();
    std::fs::write(
        bad.path(),
        r#"{"tensors":[],"ops":[{"kind":"nope","in":[],"out":"z"}]}"#,
    )
    .unwrap();
    assert_eq!(
        tilecode(&["run", bad.path().to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn output_is_deterministic() {
    for args in [
        vec!["run", "layernorm.json"],
        vec!["run", "branch_taken.jsonl", "--mode", "stream"],
        vec!["disasm", "addmm.json"],
    ] {
        let mut full: Vec<String> = args.iter().map(|s| s.to_string()).collect();
        full[1] = data(args[1]);
        let argv: Vec<&str> = full.iter().map(String::as_str).collect();
        let a = tilecode(&argv);
        let mut seq = argv.clone();
        seq.push("--sequential");
        let b = tilecode(&seq);
        assert_eq!(a.stdout, b.stdout, "{args:?}");
        assert_eq!(a.stdout, tilecode(&argv).stdout);
    }
}
