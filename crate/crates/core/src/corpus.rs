//! Bundled example programs, suites and exploit cases.
//!
//! The same files live under `corpus/` in this crate so the command-line
//! tool can run them from disk.

pub const STRCPY: &str = include_str!("../corpus/strcpy.s");
pub const STRCPY_WIN: &str = include_str!("../corpus/strcpy_win.s");
pub const LOCAL_OVERFLOW: &str = include_str!("../corpus/local_overflow.s");
pub const POINTER_OVERWRITE: &str = include_str!("../corpus/pointer_overwrite.s");
pub const GLOBAL_OVERFLOW: &str = include_str!("../corpus/global_overflow.s");
pub const DISPATCH: &str = include_str!("../corpus/dispatch.s");
pub const RECURSION: &str = include_str!("../corpus/recursion.s");
pub const CALLS: &str = include_str!("../corpus/calls.s");
pub const STRAIGHT: &str = include_str!("../corpus/straight.s");
pub const ANNOUNCE_LOOP: &str = include_str!("../corpus/announce_loop.s");

/// `(file name, source)` of every program.
pub const PROGRAMS: &[(&str, &str)] = &[
    ("strcpy.s", STRCPY),
    ("strcpy_win.s", STRCPY_WIN),
    ("local_overflow.s", LOCAL_OVERFLOW),
    ("pointer_overwrite.s", POINTER_OVERWRITE),
    ("global_overflow.s", GLOBAL_OVERFLOW),
    ("dispatch.s", DISPATCH),
    ("recursion.s", RECURSION),
    ("calls.s", CALLS),
    ("straight.s", STRAIGHT),
    ("announce_loop.s", ANNOUNCE_LOOP),
];

/// Exploit case manifests.
pub const CASES: &[(&str, &str)] = &[
    (
        "local_overflow.case.json",
        include_str!("../corpus/local_overflow.case.json"),
    ),
    (
        "global_overflow.case.json",
        include_str!("../corpus/global_overflow.case.json"),
    ),
    (
        "pointer_overwrite.case.json",
        include_str!("../corpus/pointer_overwrite.case.json"),
    ),
];

/// `(program, suite)` pairs for programs with a committed benign suite.
pub const SUITES: &[(&str, &str)] = &[
    ("strcpy.s", include_str!("../corpus/strcpy.suite.json")),
    (
        "local_overflow.s",
        include_str!("../corpus/local_overflow.suite.json"),
    ),
    ("recursion.s", include_str!("../corpus/recursion.suite.json")),
    ("calls.s", include_str!("../corpus/calls.suite.json")),
    ("straight.s", include_str!("../corpus/straight.suite.json")),
    ("dispatch.s", include_str!("../corpus/dispatch.suite.json")),
];

pub fn program(name: &str) -> Option<&'static str> {
    PROGRAMS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn suite(name: &str) -> Option<crate::inputs::SuiteFile> {
    let (_, text) = SUITES.iter().find(|(n, _)| *n == name)?;
    Some(serde_json::from_str(text).expect("bundled suite parses"))
}
