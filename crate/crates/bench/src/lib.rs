//! Fixtures shared by the criterion benchmarks in `benches/`.

use proconda_core::asm::{parse_program, Program};
use proconda_core::harness::{protect, Protected};
use proconda_core::{corpus, PipelineConfig, TestInput};

/// A corpus program with its benign suite.
pub struct Fixture {
    pub name: &'static str,
    pub program: Program,
    pub suite: Vec<TestInput>,
}

impl Fixture {
    pub fn protected(&self) -> Protected {
        protect(&self.program, &self.suite, &PipelineConfig::default()).expect("corpus fixture protects")
    }
}

/// Every corpus program that ships with a suite.
pub fn fixtures() -> Vec<Fixture> {
    corpus::SUITES
        .iter()
        .map(|(name, _)| Fixture {
            name,
            program: parse_program(corpus::program(name).unwrap()).unwrap(),
            suite: corpus::suite(name).unwrap().expand(),
        })
        .collect()
}

/// The announce micro-program and an input that runs `pairs` brackets.
pub fn announce_loop(pairs: i32) -> (Program, TestInput) {
    let p = parse_program(corpus::ANNOUNCE_LOOP).unwrap();
    (p, TestInput::new("pairs").with_scalar(pairs))
}

#[cfg(test)]
mod tests {
    #[test]
    fn every_fixture_protects() {
        for f in super::fixtures() {
            assert!(!f.suite.is_empty(), "{}", f.name);
            f.protected();
        }
    }
}
