use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn corpus(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/corpus").join(name)
}

fn proconda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_proconda"))
        .args(args)
        .env_remove("PROCONDA_CONFIG")
        .env_remove("PROCONDA_MODE")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn phases_are_deterministic() {
    let prog = corpus("dispatch.s");
    let suite = corpus("dispatch.suite.json");
    for args in [
        vec!["analyze", s(&prog)],
        vec!["slice", s(&prog), "--suite", s(&suite)],
    ] {
        let a = proconda(&args);
        let b = proconda(&args);
        assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
        assert_eq!(a.stdout, b.stdout);
    }
}

#[test]
fn pipeline_through_files_protects_strcpy() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let slice = dir.path().join("slice.json");
    let out = dir.path().join("protected.s");
    let rr = dir.path().join("rewrite.json");
    let prog = corpus("strcpy.s");
    assert!(proconda(&["analyze", s(&prog), "-o", s(&report)]).status.success());
    let st = proconda(&[
        "slice", s(&prog), "--suite", s(&corpus("strcpy.suite.json")), "--report", s(&report), "-o", s(&slice),
    ]);
    assert!(st.status.success());
    let st = proconda(&[
        "rewrite", s(&prog), "--slice", s(&slice), "--report", s(&report), "-o", s(&out), "--rewrite-report", s(&rr),
    ]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));

    // benign input: same exit status in both builds
    let plain = proconda(&["run", s(&prog), "--buffer", "src=AB"]);
    let prot = proconda(&["run", s(&out), "--buffer", "src=AB"]);
    assert_eq!(plain.status.code(), prot.status.code());
    assert_eq!(plain.status.code(), Some(0x41));

    let long = format!("src={}", "A".repeat(100));
    let prot = proconda(&["run", s(&out), "--buffer", &long, "--rewrite-report", s(&rr)]);
    assert_eq!(prot.status.code(), Some(3));
    let text = String::from_utf8_lossy(&prot.stdout);
    assert!(text.contains("ProtectedWrite"), "{text}");
    assert!(text.contains("original WIO=strcpy+0xc"), "{text}");
}

#[test]
fn rewriting_an_unfinalized_slice_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let slice = dir.path().join("slice.json");
    let prog = corpus("local_overflow.s");
    let st = proconda(&[
        "slice", s(&prog), "--suite", s(&corpus("local_overflow.undercover.suite.json")), "-o", s(&slice),
    ]);
    assert_eq!(st.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&st.stderr).contains("below the threshold"));
    assert_eq!(proconda(&["rewrite", s(&prog), "--slice", s(&slice)]).status.code(), Some(2));
}

#[test]
fn exploit_test_and_overhead_succeed_on_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("matrix.json");
    let st = proconda(&["exploit-test", s(&corpus("")), "--json", s(&json)]);
    assert!(st.status.success());
    assert!(String::from_utf8_lossy(&st.stdout).contains("prevented 3/3"));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(m["rows"].as_array().unwrap().len(), 3);

    let st = proconda(&["overhead", s(&corpus("calls.s")), "--suite", s(&corpus("calls.suite.json")), "--json"]);
    assert!(st.status.success());
    let r: serde_json::Value = serde_json::from_slice(&st.stdout).unwrap();
    let diff = r["cycles_syscall_mode"].as_u64().unwrap() - r["cycles_nop_mode"].as_u64().unwrap();
    assert_eq!(diff, r["announce_executions"].as_u64().unwrap() * 6449);
}

#[test]
fn bad_input_exits_with_usage_status() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.s");
    std::fs::write(&bad, "main:\n    MOV r0, #1\n    FOO r1\n").unwrap();
    let st = proconda(&["analyze", s(&bad)]);
    assert_eq!(st.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&st.stderr).contains("line 3"));
    assert_eq!(proconda(&["analyze", "/nonexistent.s"]).status.code(), Some(4));
    assert_eq!(proconda(&["--mode", "fast", "analyze", s(&bad)]).status.code(), Some(4));
    assert_eq!(proconda(&["--help"]).status.code(), Some(0));
}
